"""Privacy-preserving in-home activity recognition: a from-scratch CNN engine,
transfer learning with layer freezing, sliding-window stream inference and a
discrete-event home/cloud/caregiver simulator."""

__version__ = "0.1.0"

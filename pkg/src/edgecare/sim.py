"""Discrete-event simulation of the home / cloud / caregiver deployment.

Sensors stream frames to the in-home edge device; the cloud pre-trains and
pushes a checkpoint; the edge fine-tunes, runs sliding-window inference and
sends pixel-free inference events to the caregiver centre and cloud storage.
Every message crossing from HOME to OUTSIDE passes :func:`check_boundary`.
"""

from __future__ import annotations

import copy
import heapq
import json
import logging
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import datagen, nn, stream, transfer
from .metrics import EvaluationReport, evaluate
from .stream import InferenceEvent, WindowConfig

log = logging.getLogger(__name__)

SENSOR, EDGE, CLOUD, CAREGIVER = "SENSOR", "EDGE", "CLOUD", "CAREGIVER"
HOME, OUTSIDE = "HOME", "OUTSIDE"
ROLES = (SENSOR, EDGE, CLOUD, CAREGIVER)
ROLE_ZONE = {SENSOR: HOME, EDGE: HOME, CLOUD: OUTSIDE, CAREGIVER: OUTSIDE}

FRAME_BATCH = "FRAME_BATCH"
MODEL_PUSH = "MODEL_PUSH"
MODEL_REQUEST = "MODEL_REQUEST"
INFERENCE_EVENT = "INFERENCE_EVENT"
ACK = "ACK"

NONE, NOTIFY, ESCALATE = "NONE", "NOTIFY", "ESCALATE"


class ScenarioError(ValueError):
    pass


class PrivacyViolation(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class NodeId:
    role: str
    index: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ScenarioError(f"unknown node role {self.role!r}")
        if self.index < 0:
            raise ScenarioError("node index must be non-negative")

    @property
    def zone(self) -> str:
        return ROLE_ZONE[self.role]

    def __str__(self):
        return f"{self.role}:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        role, _, index = str(text).partition(":")
        try:
            return cls(role.upper(), int(index or 0))
        except ValueError as exc:
            raise ScenarioError(f"bad node id {text!r}") from exc


# ---------------------------------------------------------------- payloads
# Each kind has its own payload type; only FrameBatch can hold pixels.

@dataclass(frozen=True)
class FrameBatch:
    stream_id: str
    start_frame: int
    frames: np.ndarray  # uint8 [n, C, H, W]
    final: bool = False

    def serialize(self) -> bytes:
        # size model: one byte per channel per pixel
        return np.ascontiguousarray(self.frames, dtype=np.uint8).tobytes()


@dataclass(frozen=True)
class ModelPush:
    checkpoint: bytes

    def serialize(self) -> bytes:
        return self.checkpoint


@dataclass(frozen=True)
class ModelRequest:
    home_id: str

    def serialize(self) -> bytes:
        return json.dumps({"home_id": self.home_id}, separators=(",", ":")).encode()


@dataclass(frozen=True)
class InferencePayload:
    event: InferenceEvent

    def serialize(self) -> bytes:
        return self.event.to_json().encode()


@dataclass(frozen=True)
class Ack:
    of_kind: str
    of_seq: int

    def serialize(self) -> bytes:
        return json.dumps({"ack": self.of_kind, "seq": self.of_seq}, separators=(",", ":")).encode()


PAYLOAD_TYPES = {FRAME_BATCH: FrameBatch, MODEL_PUSH: ModelPush, MODEL_REQUEST: ModelRequest,
                 INFERENCE_EVENT: InferencePayload, ACK: Ack}


@dataclass(frozen=True)
class Message:
    src: NodeId
    dst: NodeId
    kind: str
    payload: object
    send_tick: int
    seq: int = 0

    def __post_init__(self):
        expected = PAYLOAD_TYPES.get(self.kind)
        if expected is None:
            raise ValueError(f"unknown message kind {self.kind!r}")
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.kind} needs a {expected.__name__} payload")
        object.__setattr__(self, "size_bytes", len(self.payload.serialize()))
        if self.size_bytes <= 0:
            raise ValueError("empty payload")

    def crosses_boundary(self) -> bool:
        return self.src.zone == HOME and self.dst.zone == OUTSIDE


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""


def check_boundary(msg: Message) -> Verdict:
    """Only inference-level traffic may leave the home."""
    if not msg.crosses_boundary():
        return Verdict(True)
    if msg.kind in (INFERENCE_EVENT, MODEL_REQUEST, ACK):
        return Verdict(True)
    if msg.kind == FRAME_BATCH:
        return Verdict(False, "raw data crossing home boundary")
    return Verdict(False, f"{msg.kind} may not leave the home")


@dataclass(frozen=True)
class LinkSpec:
    a: NodeId
    b: NodeId
    latency_ticks: int
    bandwidth_bytes_per_tick: int

    def __post_init__(self):
        if self.latency_ticks < 0 or self.bandwidth_bytes_per_tick <= 0:
            raise ScenarioError("link latency must be >= 0 and bandwidth positive")

    @property
    def endpoints(self):
        return self.a, self.b

    def delivery_tick(self, send_tick: int, size: int) -> int:
        return send_tick + self.latency_ticks + math.ceil(size / self.bandwidth_bytes_per_tick)

    def key(self) -> str:
        return f"{self.a}<->{self.b}"


@dataclass
class TrafficLedger:
    per_link_bytes: dict = field(default_factory=dict)
    per_kind_count: dict = field(default_factory=dict)
    boundary_bytes: int = 0
    delivered_bytes: int = 0
    rejected: int = 0

    def record(self, link: LinkSpec, msg: Message) -> None:
        key = link.key()
        self.per_link_bytes[key] = self.per_link_bytes.get(key, 0) + msg.size_bytes
        self.per_kind_count[msg.kind] = self.per_kind_count.get(msg.kind, 0) + 1
        self.delivered_bytes += msg.size_bytes
        if msg.crosses_boundary():
            self.boundary_bytes += msg.size_bytes

    def to_dict(self) -> dict:
        return {"per_link_bytes": dict(sorted(self.per_link_bytes.items())),
                "per_kind_count": dict(sorted(self.per_kind_count.items())),
                "boundary_bytes": self.boundary_bytes, "delivered_bytes": self.delivered_bytes,
                "rejected": self.rejected}


# ---------------------------------------------------------------- caregiver

def caregiver_policy(event: InferenceEvent, history, repeat_threshold: int = 5, rolling_window: int = 20) -> str:
    """ALERT escalates, SERVICE_REQUEST notifies; INFO notifies only when the same
    activity fills ``repeat_threshold`` of the last ``rolling_window`` events
    (this one included)."""
    if event.category == "ALERT":
        return ESCALATE
    if event.category == "SERVICE_REQUEST":
        return NOTIFY
    recent = list(history)[-(rolling_window - 1):] if rolling_window > 1 else []
    same = 1 + sum(1 for e in recent if e.category == "INFO" and e.activity == event.activity)
    return NOTIFY if same >= repeat_threshold else NONE


# ---------------------------------------------------------------- scenario

def default_scenario() -> dict:
    text = resources.files("edgecare").joinpath("configs/default_scenario.json").read_text()
    return json.loads(text)


def load_scenario(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario is not valid JSON: {exc}") from exc


def _spec_from(section: dict, base) -> datagen.GeneratorSpec:
    if "classes" in section:
        return datagen.GeneratorSpec.from_dict({k: v for k, v in section.items()
                                                if k in datagen.GeneratorSpec.__dataclass_fields__})
    return base


@dataclass
class Scenario:
    home_id: str
    nodes: list
    links: dict
    source_spec: datagen.GeneratorSpec
    target_spec: datagen.GeneratorSpec
    source_frames_per_class: int
    finetune_windows_per_class: int
    holdout_windows_per_class: int
    segment_len: int
    sensor_streams: dict
    batch_frames: int
    period_ticks: int
    stream_start_tick: int
    window: WindowConfig
    policy: transfer.FreezePolicy
    pretrain: transfer.FineTuneConfig
    finetune: transfer.FineTuneConfig
    category_map: dict
    repeat_threshold: int
    rolling_window: int
    pretrain_ticks: int
    finetune_ticks: int
    seed: int

    def link(self, a: NodeId, b: NodeId) -> LinkSpec:
        link = self.links.get(frozenset((a, b)))
        if link is None:
            raise ScenarioError(f"no link between {a} and {b}")
        return link

    def node(self, role: str, index: int = 0) -> NodeId:
        nid = NodeId(role, index)
        if nid not in self.nodes:
            raise ScenarioError(f"unknown node {nid}")
        return nid


def build_scenario(cfg: dict, seed: int) -> Scenario:
    """Validate a scenario document; every dataset/training seed is offset by ``seed``."""
    try:
        nodes = [NodeId.parse(n) for n in cfg["nodes"]]
        if len(set(nodes)) != len(nodes):
            raise ScenarioError("duplicate node ids")
        for role in (EDGE, CLOUD, CAREGIVER):
            if not any(n.role == role for n in nodes):
                raise ScenarioError(f"scenario needs a {role} node")
        links = {}
        for ld in cfg["links"]:
            a, b = NodeId.parse(ld["a"]), NodeId.parse(ld["b"])
            for n in (a, b):
                if n not in nodes:
                    raise ScenarioError(f"link references unknown node {n}")
            links[frozenset((a, b))] = LinkSpec(a, b, int(ld["latency_ticks"]), int(ld["bandwidth_bytes_per_tick"]))
        src_cfg, tgt_cfg = cfg.get("source", {}), cfg.get("target", {})
        source = _spec_from(src_cfg, datagen.source_spec())
        target = _spec_from(tgt_cfg, datagen.target_spec())
        source = datagen.GeneratorSpec.from_dict({**source.to_dict(), "seed": source.seed + seed})
        target = datagen.GeneratorSpec.from_dict({**target.to_dict(), "seed": target.seed + seed})
        sensors = {}
        for sd in cfg.get("sensors", []):
            nid = NodeId.parse(sd["node"])
            if nid not in nodes or nid.role != SENSOR:
                raise ScenarioError(f"sensor stream bound to unknown sensor {nid}")
            sensors[nid] = {"stream_id": sd.get("stream_id", str(nid)),
                            "segments": [tuple(s) for s in sd.get("segments", [])],
                            "seed": int(sd.get("seed", 0)) + seed}
        window = WindowConfig(**cfg.get("window", {}))
        policy_cfg = cfg.get("freeze_policy", "case3")
        policy = (transfer.preset_policy(policy_cfg) if isinstance(policy_cfg, str)
                  else transfer.FreezePolicy.from_dict(policy_cfg))
        pre = cfg.get("pretrain", {})
        fin = cfg.get("finetune", {})
        care = cfg.get("caregiver", {})
        compute = cfg.get("compute", {})
        sc = Scenario(
            home_id=cfg.get("home_id", "home-0"), nodes=nodes, links=links,
            source_spec=source, target_spec=target,
            source_frames_per_class=int(src_cfg.get("frames_per_class", 240)),
            finetune_windows_per_class=int(tgt_cfg.get("finetune_windows_per_class", 30)),
            holdout_windows_per_class=int(tgt_cfg.get("holdout_windows_per_class", 30)),
            segment_len=int(cfg.get("segment_len", 16)),
            sensor_streams=sensors,
            batch_frames=int(cfg.get("batch_frames", 16)),
            period_ticks=int(cfg.get("period_ticks", 1)),
            stream_start_tick=int(cfg.get("stream_start_tick", 0)),
            window=window, policy=policy,
            pretrain=transfer.FineTuneConfig(int(pre.get("epochs", 8)), int(pre.get("batch_size", 16)),
                                             float(pre.get("learning_rate", 0.02)), int(pre.get("seed", 0)) + seed),
            finetune=transfer.FineTuneConfig(int(fin.get("epochs", 10)), int(fin.get("batch_size", 16)),
                                             float(fin.get("learning_rate", 0.02)), int(fin.get("seed", 0)) + seed,
                                             target.class_names),
            category_map=stream.build_category_map(target.class_names, cfg.get("category_map")),
            repeat_threshold=int(care.get("repeat_threshold", 5)),
            rolling_window=int(care.get("rolling_window", 20)),
            pretrain_ticks=int(compute.get("pretrain_ticks", 0)),
            finetune_ticks=int(compute.get("finetune_ticks", 0)),
            seed=seed,
        )
    except KeyError as exc:
        raise ScenarioError(f"scenario missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc)) from exc
    edge, cloud, care_node = sc.node(EDGE), sc.node(CLOUD), sc.node(CAREGIVER)
    for a, b in [(edge, cloud), (edge, care_node)] + [(s, edge) for s in sensors]:
        sc.link(a, b)
    return sc


# ---------------------------------------------------------------- nodes

@dataclass
class SimulationResult:
    event_log: list
    ledger: TrafficLedger
    report: EvaluationReport | None
    actions: list
    cloud_storage: list
    checkpoint: bytes
    baseline: bool = False

    def log_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in self.event_log)


class _Sim:
    def __init__(self, sc: Scenario, baseline: bool):
        self.sc = sc
        self.baseline = baseline
        self.queue: list = []
        self.seq = 0
        self.tick = 0
        self.log: list[dict] = []
        self.ledger = TrafficLedger()
        self.edge, self.cloud, self.care = sc.node(EDGE), sc.node(CLOUD), sc.node(CAREGIVER)
        # cloud state
        self.cloud_ckpt: bytes | None = None
        self.pending_requests: list[Message] = []
        self.cloud_storage: list[dict] = []
        self.raw_frames_at_cloud = 0
        # edge state
        self.edge_model: nn.Model | None = None
        self.edge_ready = False
        self.buffers: dict[str, list] = {}
        self.complete: dict[str, int] = {}
        self.inferred: set[str] = set()
        self.truth: dict[str, np.ndarray] = {}
        self.frame_scores: dict[str, list] = {}
        # caregiver state
        self.care_history: deque = deque(maxlen=max(sc.rolling_window, 1))
        self.actions: list[dict] = []

    # -- plumbing
    def _push(self, tick, item):
        heapq.heappush(self.queue, (tick, self.seq, item))
        self.seq += 1

    def send(self, src, dst, kind, payload):
        msg = Message(src, dst, kind, payload, self.tick, self.seq)
        link = self.sc.link(src, dst)
        verdict = check_boundary(msg)
        if not verdict.accepted and not (self.baseline and kind == FRAME_BATCH):
            self.ledger.rejected += 1
            self._log("reject", msg=msg, reason=verdict.reason)
            return
        self._push(link.delivery_tick(self.tick, msg.size_bytes), ("deliver", msg, link))

    def timer(self, delay, name, **data):
        self._push(self.tick + delay, ("timer", name, data))

    def _log(self, typ, msg=None, **extra):
        entry = {"tick": self.tick, "type": typ}
        if msg is not None:
            entry.update({"kind": msg.kind, "src": str(msg.src), "dst": str(msg.dst),
                          "size": msg.size_bytes, "send_tick": msg.send_tick, "seq": msg.seq,
                          "dst_zone": msg.dst.zone})
        entry.update(extra)
        self.log.append(entry)

    # -- run
    def run(self) -> SimulationResult:
        sc = self.sc
        self.timer(sc.pretrain_ticks, "cloud_pretrain")
        self.send(self.edge, self.cloud, MODEL_REQUEST, ModelRequest(sc.home_id))
        self._schedule_sensors()
        while self.queue:
            tick, _, item = heapq.heappop(self.queue)
            self.tick = tick
            if item[0] == "deliver":
                _, msg, link = item
                self.ledger.record(link, msg)
                self._log("deliver", msg)
                self._dispatch(msg)
            else:
                _, name, data = item
                getattr(self, f"_on_{name}")(**data)
        return SimulationResult(self.log, self.ledger, self._report(), self.actions, self.cloud_storage,
                                self._edge_checkpoint(), self.baseline)

    def _schedule_sensors(self):
        sc = self.sc
        for nid, cfg in sorted(sc.sensor_streams.items()):
            if not cfg["segments"]:
                continue
            spec = datagen.GeneratorSpec.from_dict({**sc.target_spec.to_dict(), "seed": cfg["seed"]})
            st = datagen.generate(spec, cfg["segments"])
            frames = datagen.quantize(st.frames)
            self.truth[cfg["stream_id"]] = st.labels
            n = len(frames)
            for k, start in enumerate(range(0, n, sc.batch_frames)):
                batch = FrameBatch(cfg["stream_id"], start, frames[start:start + sc.batch_frames],
                                   final=start + sc.batch_frames >= n)
                self._push(sc.stream_start_tick + k * sc.period_ticks, ("timer", "sensor_emit",
                                                                        {"sensor": nid, "batch": batch}))

    def _dispatch(self, msg: Message):
        handler = {
            (CLOUD, MODEL_REQUEST): self._cloud_model_request,
            (CLOUD, INFERENCE_EVENT): self._cloud_store,
            (CLOUD, FRAME_BATCH): self._cloud_raw,
            (CLOUD, ACK): lambda m: None,
            (EDGE, MODEL_PUSH): self._edge_model_push,
            (EDGE, FRAME_BATCH): self._edge_frames,
            (EDGE, ACK): lambda m: None,
            (CAREGIVER, INFERENCE_EVENT): self._caregiver_event,
        }.get((msg.dst.role, msg.kind))
        if handler is None:
            raise RuntimeError(f"{msg.dst} has no handler for {msg.kind}")
        handler(msg)

    # -- phase 1 + 2: cloud
    def _on_cloud_pretrain(self):
        sc = self.sc
        spec = sc.source_spec
        st = datagen.generate(spec, datagen.balanced_segments(len(spec.classes), sc.source_frames_per_class,
                                                              sc.segment_len, spec.seed))
        train, hold = datagen.split(st, 0.75, spec.seed, sc.window.window_len)
        layers = transfer.reference_architecture(len(spec.classes), in_channels=spec.channels)
        model, hist = transfer.pretrain(layers, spec.class_names, (train.frames, train.labels),
                                        (hold.frames, hold.labels), sc.pretrain)
        self.cloud_ckpt = transfer.checkpoint_bytes(model, spec.class_names, {
            "trained_on": f"synthetic-source:{spec.fingerprint()[:16]}", "epochs": sc.pretrain.epochs,
            "seed": sc.pretrain.seed})
        self._log("phase", phase="cloud_pretrain_done", best_epoch=transfer.best_epoch(hist),
                  checkpoint_sha256=transfer.hashlib.sha256(self.cloud_ckpt).hexdigest())
        for req in self.pending_requests:
            self._push_model(req.src)
        self.pending_requests.clear()

    def _cloud_model_request(self, msg):
        if self.cloud_ckpt is None:
            self.pending_requests.append(msg)
        else:
            self._push_model(msg.src)

    def _push_model(self, dst):
        self.send(self.cloud, dst, MODEL_PUSH, ModelPush(self.cloud_ckpt))

    def _cloud_store(self, msg):
        self.cloud_storage.append(msg.payload.event.to_dict())

    def _cloud_raw(self, msg):
        self.raw_frames_at_cloud += len(msg.payload.frames)

    # -- phase 3: edge fine-tune
    def _edge_model_push(self, msg):
        sc = self.sc
        self.send(self.edge, msg.src, ACK, Ack(MODEL_PUSH, msg.seq))
        ckpt = transfer.parse_checkpoint(msg.payload.checkpoint)
        spec = sc.target_spec
        per_class = (sc.finetune_windows_per_class + sc.holdout_windows_per_class) * sc.window.window_len
        seg_len = sc.segment_len
        per_class = -(-per_class // seg_len) * seg_len
        st = datagen.generate(spec, datagen.balanced_segments(len(spec.classes), per_class, seg_len, spec.seed))
        frac = sc.finetune_windows_per_class / (sc.finetune_windows_per_class + sc.holdout_windows_per_class)
        train, hold = datagen.split(st, frac, spec.seed, sc.window.window_len)
        model = transfer.realign_head(ckpt, spec.class_names, sc.finetune.seed)
        budget = transfer.apply_freeze(model, sc.policy)
        best, hist = transfer.fine_tune(model, sc.policy, (train.frames, train.labels),
                                        (hold.frames, hold.labels), sc.finetune)
        self.edge_model = best
        self._log("phase", phase="edge_finetune_started", trainable=budget.trainable, total=budget.total)
        self.timer(sc.finetune_ticks, "edge_ready", best_epoch=transfer.best_epoch(hist))

    def _on_edge_ready(self, best_epoch):
        self.edge_ready = True
        self._log("phase", phase="edge_finetune_done", best_epoch=best_epoch)
        for sid in sorted(self.complete):
            self._try_infer(sid)

    # -- phase 4: streaming
    def _on_sensor_emit(self, sensor, batch):
        self.send(sensor, self.edge, FRAME_BATCH, batch)

    def _edge_frames(self, msg):
        batch = msg.payload
        self.buffers.setdefault(batch.stream_id, []).append(batch)
        if self.baseline:
            # anti-pattern reference: ship raw frames to the cloud
            self.send(self.edge, self.cloud, FRAME_BATCH, batch)
        if batch.final:
            self.complete[batch.stream_id] = batch.start_frame + len(batch.frames)
            self._try_infer(batch.stream_id)

    def _try_infer(self, sid):
        if not self.edge_ready or sid in self.inferred:
            return
        batches = sorted(self.buffers[sid], key=lambda b: b.start_frame)
        frames = np.concatenate([b.frames for b in batches]).astype(np.float64) / 255.0
        if len(frames) < self.sc.window.window_len:
            self._log("phase", phase="stream_too_short", stream_id=sid, frames=len(frames))
            self.inferred.add(sid)
            return
        events, scores = stream.run_stream(self.edge_model, frames, self.sc.window, self.sc.category_map,
                                           self.sc.target_spec.class_names, sid, self.tick)
        self.inferred.add(sid)
        self.frame_scores[sid] = scores
        for ev in events:
            self.send(self.edge, self.care, INFERENCE_EVENT, InferencePayload(ev))
            self.send(self.edge, self.cloud, INFERENCE_EVENT, InferencePayload(ev))

    def _caregiver_event(self, msg):
        ev = msg.payload.event
        action = caregiver_policy(ev, self.care_history, self.sc.repeat_threshold, self.sc.rolling_window)
        self.care_history.append(ev)
        self.actions.append({"tick": self.tick, "stream_id": ev.stream_id, "start": ev.start, "end": ev.end,
                             "activity": ev.activity, "category": ev.category, "action": action})
        self.send(self.care, msg.src, ACK, Ack(INFERENCE_EVENT, msg.seq))

    # -- results
    def _report(self):
        sids = sorted(self.frame_scores)
        if not sids:
            return None
        scores = np.concatenate([np.array([fs.score for fs in self.frame_scores[s]]) for s in sids])
        labels = np.concatenate([self.truth[s][:len(self.frame_scores[s])] for s in sids])
        return evaluate(scores, labels, self.sc.target_spec.class_names)

    def _edge_checkpoint(self) -> bytes:
        if self.edge_model is None:
            return b""
        return transfer.checkpoint_bytes(self.edge_model, self.sc.target_spec.class_names, {
            "trained_on": f"synthetic-target:{self.sc.target_spec.fingerprint()[:16]}",
            "epochs": self.sc.finetune.epochs, "seed": self.sc.finetune.seed})


def run_simulation(scenario, seed: int, baseline: bool = False) -> SimulationResult:
    """Run the four pipeline phases; ``baseline`` additionally ships raw frames to the cloud.

    ``scenario`` is a scenario document (dict) or an already built :class:`Scenario`.
    """
    sc = scenario if isinstance(scenario, Scenario) else build_scenario(copy.deepcopy(scenario), seed)
    result = _Sim(sc, baseline).run()
    if not baseline:
        leaked = [e for e in result.event_log
                  if e["type"] == "deliver" and e["kind"] == FRAME_BATCH and e["dst_zone"] == OUTSIDE]
        if leaked:
            raise PrivacyViolation(f"{len(leaked)} raw frame batches left the home")
    return result


def kind_counts(event_log) -> Counter:
    return Counter(e["kind"] for e in event_log if e["type"] == "deliver")

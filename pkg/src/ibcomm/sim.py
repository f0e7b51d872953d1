"""Synthetic multi-agent world with occlusion-aware BEV observations,
a bandwidth-constrained link model, and the per-cycle collaboration
accounting for the four collaboration modes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codec, detect, model as mdl

MODES = ("none", "late", "standard", "infocom")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    n_agents: int = 2
    n_objects: tuple = (3, 5)  # inclusive range
    size_choices: tuple = (3, 5)
    sensing_radius: float = 1e9  # effectively unlimited by default
    ensure_complementary: bool = False

    def __post_init__(self):
        if not 2 <= self.n_agents <= 5:
            raise ValueError("n_agents must be in [2, 5]")


@dataclass(frozen=True)
class Scene:
    height: int
    width: int
    boxes: tuple  # detect.Box ground truth
    agents: tuple  # (row, col) float positions
    sensing_radius: float
    seed: int


def _agent_positions(rng, cfg):
    """Agents hug opposite borders so their views are complementary."""
    h, w = cfg.height, cfg.width
    anchors = [(h / 2, 1.5), (h / 2, w - 1.5), (1.5, w / 2),
               (h - 1.5, w / 2), (h / 2, w / 2)]
    out = []
    for i in range(cfg.n_agents):
        ar, ac = anchors[i]
        out.append((ar + rng.uniform(-h / 8, h / 8), ac))
    return tuple(out)


def _sample_boxes(rng, cfg):
    h, w = cfg.height, cfg.width
    n = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    boxes = []
    for _ in range(n):
        bw = int(rng.choice(cfg.size_choices))
        bh = int(rng.choice(cfg.size_choices))
        cx = int(rng.integers(bw // 2 + 1, w - bw // 2 - 1)) + 0.5
        cy = int(rng.integers(bh // 2 + 1, h - bh // 2 - 1)) + 0.5
        boxes.append(detect.Box(cx=cx, cy=cy, w=float(bw), h=float(bh)))
    return tuple(boxes)


def generate_scene(seed, cfg):
    """Deterministic scene; with ``ensure_complementary`` the sampler
    retries until some object is hidden from agent 0 but seen by agent 1."""
    rng = np.random.default_rng(seed)
    for _ in range(200):
        agents = _agent_positions(rng, cfg)
        boxes = _sample_boxes(rng, cfg)
        scene = Scene(height=cfg.height, width=cfg.width, boxes=boxes,
                      agents=agents, sensing_radius=cfg.sensing_radius, seed=seed)
        if not cfg.ensure_complementary:
            return scene
        vis = [visible_boxes(scene, i) for i in range(min(2, cfg.n_agents))]
        hidden0 = [b for b in boxes if b not in vis[0]]
        if hidden0 and any(b in vis[1] for b in hidden0):
            return scene
    raise RuntimeError(f"seed {seed}: no complementary scene found in 200 tries")


def occupancy_grid(scene):
    """(H, W) boolean grid: cell centers covered by any box."""
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = ys + 0.5, xs + 0.5
    occ = np.zeros((h, w), dtype=bool)
    for b in scene.boxes:
        occ |= ((np.abs(cx - b.cx) < b.w / 2) & (np.abs(cy - b.cy) < b.h / 2))
    return occ


def render_observation(scene, agent_id):
    """(2, H, W) observation: visible occupancy + visibility channels.

    A cell is visible when the ray from the agent to the cell center does
    not cross an occupied cell strictly before reaching the target cell.
    """
    if not 0 <= agent_id < len(scene.agents):
        raise ValueError(f"agent {agent_id} out of range")
    h, w = scene.height, scene.width
    occ = occupancy_grid(scene)
    ar, ac = scene.agents[agent_id]
    vis = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            ty, tx = r + 0.5, c + 0.5
            dy, dx = ty - ar, tx - ac
            dist = float(np.hypot(dy, dx))
            if dist > scene.sensing_radius:
                continue
            steps = max(1, int(dist / 0.25))
            ts = (np.arange(1, steps) / steps)
            py = np.clip((ar + ts * dy).astype(np.int64), 0, h - 1)
            px = np.clip((ac + ts * dx).astype(np.int64), 0, w - 1)
            onpath = (py != r) | (px != c)
            vis[r, c] = not occ[py[onpath], px[onpath]].any()
    obs = np.zeros((2, h, w), dtype=np.float64)
    obs[0] = occ & vis
    obs[1] = vis
    return obs


def visible_boxes(scene, agent_id):
    """Boxes with at least one occupied cell visible to the agent."""
    obs = render_observation(scene, agent_id)
    seen = []
    h, w = scene.height, scene.width
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = ys + 0.5, xs + 0.5
    for b in scene.boxes:
        cells = ((np.abs(cx - b.cx) < b.w / 2) & (np.abs(cy - b.cy) < b.h / 2))
        if (obs[0][cells] > 0).any():
            seen.append(b)
    return seen


def scene_labels(scene):
    """Ground truth for evaluation: boxes visible to at least one agent."""
    labels = []
    for i in range(len(scene.agents)):
        for b in visible_boxes(scene, i):
            if b not in labels:
                labels.append(b)
    return labels


# ---------------------------------------------------------------------------
# link model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinkModel:
    """Constant rate (bytes/s) or a piecewise (duration_s, rate) schedule."""

    rate: object = 0.4 * 1024 * 1024
    deadline: float = 1.0
    loss_prob: float = 0.0

    def __post_init__(self):
        if isinstance(self.rate, (int, float)):
            if self.rate <= 0:
                raise ValueError("rate must be positive")
        else:
            for dur, r in self.rate:
                if dur <= 0 or r <= 0:
                    raise ValueError("schedule entries must be positive")
        if self.deadline <= 0:
            raise ValueError("deadline must be positive")
        if not 0 <= self.loss_prob < 1:
            raise ValueError("loss_prob must be in [0, 1)")


def transmit_time(nbytes, link):
    """Seconds to push ``nbytes`` through the link."""
    if nbytes < 0:
        raise ValueError("bytes must be nonnegative")
    if isinstance(link.rate, (int, float)):
        return nbytes / link.rate
    t, remaining = 0.0, float(nbytes)
    for dur, r in link.rate:
        sendable = r * dur
        if remaining <= sendable:
            return t + remaining / r
        remaining -= sendable
        t += dur
    _, last_rate = link.rate[-1]
    return t + remaining / last_rate


# ---------------------------------------------------------------------------
# collaboration cycle
# ---------------------------------------------------------------------------

@dataclass
class CycleResult:
    mode: str
    detections: dict  # receiver agent id -> list of Box
    reported_bytes: float
    wire_bytes: float
    transmit_seconds: float
    compute_seconds: float
    completed_within_deadline: bool
    dropped_pairs: tuple = field(default_factory=tuple)


def run_cycle(mode, scene, model, link, threshold=0.5, frame_id=0, rng=None):
    """One full collaboration round; every agent acts as receiver."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    cfg = model.cfg
    n = len(scene.agents)
    t0 = time.perf_counter()
    obs = [render_observation(scene, i) for i in range(n)]
    feats = [mdl.extract_feature(model, o) for o in obs]

    drop = np.zeros((n, n), dtype=bool)
    if link.loss_prob > 0:
        if rng is None:
            rng = np.random.default_rng(scene.seed)
        drop = rng.random((n, n)) < link.loss_prob

    reported = 0.0
    wire = 0.0
    dropped = []
    detections = {}

    if mode == "late":
        local = {i: detect.decode_boxes(mdl.predict(model, feats[i]), threshold)
                 for i in range(n)}
    for i in range(n):
        incoming = []
        for j in range(n):
            if j == i:
                continue
            if drop[j, i]:
                dropped.append((j, i))
                continue
            if mode == "none":
                continue
            if mode == "late":
                nb = codec.baseline_volume("late", cfg.c, cfg.h, cfg.w,
                                           n_boxes=len(local[j]))
                reported += nb
                wire += nb
                incoming.append(local[j])
            elif mode == "standard":
                nb = codec.baseline_volume("standard", cfg.c, cfg.h, cfg.w)
                reported += nb
                wire += nb
                incoming.append(feats[j])
            else:  # infocom
                _, e, _, q = mdl.sender_encode(model, feats[j])
                unit = codec.MessageUnit(agent_id=j, frame_id=frame_id,
                                         e=e.data.astype(np.float32), mq=q,
                                         c=cfg.c, h=cfg.h, w=cfg.w)
                frame = codec.encode_message(unit)
                rx = codec.decode_message(frame)
                reported += codec.reported_volume(cfg.d, cfg.h, cfg.w,
                                                  cfg.alpha, cfg.bits)
                wire += len(frame)
                from . import engine as eg
                incoming.append(mdl.receiver_decode(
                    model, eg.constant(rx.e.astype(np.float64)), rx.mq))
        if mode == "late":
            merged = list(detect.decode_boxes(mdl.predict(model, feats[i]), threshold))
            for boxes in incoming:
                merged.extend(boxes)
            detections[i] = detect.nms(merged, 0.5)
        else:
            fused = mdl.fuse([feats[i]] + incoming)
            detections[i] = detect.decode_boxes(mdl.predict(model, fused), threshold)

    compute_s = time.perf_counter() - t0
    transmit_s = transmit_time(wire, link)
    return CycleResult(mode=mode, detections=detections, reported_bytes=reported,
                       wire_bytes=wire, transmit_seconds=transmit_s,
                       compute_seconds=compute_s,
                       completed_within_deadline=(transmit_s + compute_s
                                                  <= link.deadline),
                       dropped_pairs=tuple(dropped))


def evaluate(mode, scenes, model, link, threshold=0.5):
    """Pooled AP over scenes and receivers at the standard IoU thresholds."""
    predictions = []
    ground_truths = {}
    for scene in scenes:
        labels = scene_labels(scene)
        result = run_cycle(mode, scene, model, link, threshold=threshold)
        for agent, boxes in result.detections.items():
            gid = (scene.seed, agent)
            ground_truths[gid] = labels
            predictions.extend((gid, b) for b in boxes)
    return detect.mean_average_precision(predictions, ground_truths)

"""Trajectory ingestion, scenario windowing, batching and synthetic scenes.

Canonical CSV header: ``frame,vehicle_id,x,y,vx,vy,lane_id`` at 10 Hz, x
longitudinal and y lateral in meters with y increasing toward lane 1 (the
leftmost lane).
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FEET = 0.3048
DT = 0.1
HIST_LEN = 30
FUT_LEN = 50
POS_SCALE = 20.0
VEL_SCALE = 10.0
RESID_SCALE = 5.0
SLOTS = ("P", "F", "LP", "LF", "RP", "RF")
CANONICAL_HEADER = ["frame", "vehicle_id", "x", "y", "vx", "vy", "lane_id"]

NGSIM_COLUMNS = {
    "vehicle_id", "frame_id", "total_frames", "global_time", "local_x", "local_y",
    "global_x", "global_y", "v_length", "v_width", "v_class", "v_vel", "v_acc",
    "lane_id", "o_zone", "d_zone", "int_id", "section_id", "direction", "movement",
    "preceding", "following", "space_headway", "time_headway", "location",
}
HIGHD_COLUMNS = {
    "frame", "id", "x", "y", "width", "height", "xvelocity", "yvelocity",
    "xacceleration", "yacceleration", "frontsightdistance", "backsightdistance",
    "dhw", "thw", "ttc", "precedingxvelocity", "precedingid", "followingid",
    "leftprecedingid", "leftalongsideid", "leftfollowingid", "rightprecedingid",
    "rightalongsideid", "rightfollowingid", "laneid",
}


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryRecord:
    frame: int
    vehicle_id: int
    x: float
    y: float
    vx: float
    vy: float
    lane_id: int


# ---- ingestion ----------------------------------------------------------

def _read_rows(path) -> tuple[list[str], list[list[str]]]:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    return header, rows


def _check_columns(path, header, known, required):
    lower = [h.lower() for h in header]
    unknown = [h for h, lo in zip(header, lower) if lo not in known]
    if unknown:
        raise IngestError(f"{path}: row 1: unknown column(s) {unknown}")
    missing = [c for c in required if c not in lower]
    if missing:
        raise IngestError(f"{path}: row 1: missing column(s) {missing}")
    return {lo: i for i, lo in enumerate(lower)}


def _check_monotone(path, rows_frames: Iterable[tuple[int, int, int]]):
    last = {}
    for rowno, vid, frame in rows_frames:
        prev = last.get(vid)
        if prev is not None and frame <= prev:
            raise IngestError(
                f"{path}: row {rowno}: frame {frame} of vehicle {vid} not after {prev}")
        last[vid] = frame


def _central_velocity(pos: np.ndarray, dt: float) -> np.ndarray:
    if len(pos) < 2:
        return np.zeros_like(pos)
    return np.gradient(pos, dt)


def ingest(path, fmt: str = "canonical") -> list[TrajectoryRecord]:
    """Load a trajectory file and normalize it to canonical 10 Hz records."""
    if fmt == "canonical":
        return _ingest_canonical(path)
    if fmt == "ngsim":
        return _ingest_ngsim(path)
    if fmt == "highd":
        return _ingest_highd(path)
    raise IngestError(f"unknown format {fmt!r}")


def _ingest_canonical(path) -> list[TrajectoryRecord]:
    header, rows = _read_rows(path)
    cols = _check_columns(path, header, set(CANONICAL_HEADER), CANONICAL_HEADER)
    out = []
    for k, r in enumerate(rows, start=2):
        try:
            rec = TrajectoryRecord(int(r[cols["frame"]]), int(r[cols["vehicle_id"]]),
                                   float(r[cols["x"]]), float(r[cols["y"]]),
                                   float(r[cols["vx"]]), float(r[cols["vy"]]),
                                   int(r[cols["lane_id"]]))
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{path}: row {k}: {exc}") from None
        if not all(math.isfinite(v) for v in (rec.x, rec.y, rec.vx, rec.vy)):
            raise IngestError(f"{path}: row {k}: non-finite coordinate")
        out.append(rec)
    _check_monotone(path, ((k, rec.vehicle_id, rec.frame) for k, rec in enumerate(out, start=2)))
    return out


def _ingest_ngsim(path) -> list[TrajectoryRecord]:
    header, rows = _read_rows(path)
    cols = _check_columns(path, header, NGSIM_COLUMNS,
                          ["vehicle_id", "frame_id", "local_x", "local_y", "lane_id"])
    tracks = defaultdict(list)
    triples = []
    for k, r in enumerate(rows, start=2):
        try:
            vid, frame = int(float(r[cols["vehicle_id"]])), int(float(r[cols["frame_id"]]))
            lat, lon = float(r[cols["local_x"]]), float(r[cols["local_y"]])
            lane = int(float(r[cols["lane_id"]]))
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{path}: row {k}: {exc}") from None
        triples.append((k, vid, frame))
        # Local_Y runs along the road; Local_X grows toward higher lane ids
        tracks[vid].append((frame, lon * FEET, -lat * FEET, lane))
    _check_monotone(path, triples)
    out = []
    for vid, pts in tracks.items():
        arr = np.array([p[:3] for p in pts], dtype=float)
        vx = _central_velocity(arr[:, 1], DT)
        vy = _central_velocity(arr[:, 2], DT)
        for (frame, x, y, lane), a, b in zip(pts, vx, vy):
            out.append(TrajectoryRecord(frame, vid, x, y, float(a), float(b), lane))
    out.sort(key=lambda r: (r.vehicle_id, r.frame))
    return out


def _ingest_highd(path, source_hz: float = 25.0) -> list[TrajectoryRecord]:
    header, rows = _read_rows(path)
    cols = _check_columns(path, header, HIGHD_COLUMNS, ["frame", "id", "x", "y", "laneid"])
    has_vel = "xvelocity" in cols and "yvelocity" in cols
    tracks = defaultdict(list)
    triples = []
    for k, r in enumerate(rows, start=2):
        try:
            frame, vid = int(float(r[cols["frame"]])), int(float(r[cols["id"]]))
            x, y = float(r[cols["x"]]), float(r[cols["y"]])
            if "width" in cols:
                x += 0.5 * float(r[cols["width"]])
            if "height" in cols:
                y += 0.5 * float(r[cols["height"]])
            vx = float(r[cols["xvelocity"]]) if has_vel else math.nan
            vy = float(r[cols["yvelocity"]]) if has_vel else math.nan
            lane = int(float(r[cols["laneid"]]))
        except (ValueError, IndexError) as exc:
            raise IngestError(f"{path}: row {k}: {exc}") from None
        triples.append((k, vid, frame))
        tracks[vid].append((frame, x, y, vx, vy, lane))
    _check_monotone(path, triples)
    out = []
    for vid, pts in tracks.items():
        arr = np.array([p[:5] for p in pts], dtype=float)
        t = arr[:, 0] / source_hz
        x, y = arr[:, 1], arr[:, 2]
        if has_vel:
            vx, vy = arr[:, 3], arr[:, 4]
        else:
            vx = _central_velocity(x, 1.0 / source_hz)
            vy = _central_velocity(y, 1.0 / source_hz)
        # image y points right of a +x driver; flip so y grows to the driver's left
        if np.mean(vx) >= 0:
            x, y, vx, vy = x, -y, vx, -vy
        else:
            x, y, vx, vy = -x, y, -vx, vy
        lanes = np.array([p[5] for p in pts])
        k0 = math.ceil(t[0] * 10 - 1e-9)
        k1 = math.floor(t[-1] * 10 + 1e-9)
        for kk in range(k0, k1 + 1):
            tk = kk / 10.0
            j = int(np.searchsorted(t, tk + 1e-12) - 1)
            j = min(max(j, 0), len(t) - 1)
            out.append(TrajectoryRecord(
                kk, vid, float(np.interp(tk, t, x)), float(np.interp(tk, t, y)),
                float(np.interp(tk, t, vx)), float(np.interp(tk, t, vy)), int(lanes[j])))
    out.sort(key=lambda r: (r.vehicle_id, r.frame))
    return out


def write_canonical(path, records: Sequence[TrajectoryRecord]) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CANONICAL_HEADER)
        for r in records:
            w.writerow([r.frame, r.vehicle_id, repr(r.x), repr(r.y), repr(r.vx), repr(r.vy), r.lane_id])


# ---- scenarios ----------------------------------------------------------

@dataclass
class ScenarioBatch:
    history: np.ndarray          # [T, N, 4] relative x, y, vx, vy
    future_truth: np.ndarray     # [F, N, 2]
    neighbor_mask: np.ndarray    # [N] bool
    intention_labels: np.ndarray  # [N, 3] one-hot left/keep/right
    target_index: int = 0
    slots: tuple = ("TAR",)
    vehicle_ids: tuple = ()
    origin: tuple = (0.0, 0.0)
    start_frame: int = 0

    def __post_init__(self):
        t, n, c = self.history.shape
        if c != 4 or self.future_truth.shape[1:] != (n, 2):
            raise ValueError(f"inconsistent scenario shapes {self.history.shape}, {self.future_truth.shape}")
        if self.neighbor_mask.sum() < 1:
            raise ValueError("scenario needs at least one active agent")

    @property
    def n_agents(self) -> int:
        return self.history.shape[1]


def intention_labels(history: np.ndarray, future: np.ndarray, threshold: float = 1.5) -> np.ndarray:
    """One-hot lateral intentions: left if lateral shift >= threshold, right if <= -threshold."""
    shift = future[-1, :, 1] - history[-1, :, 1]
    labels = np.zeros((history.shape[1], 3))
    cls = np.where(shift >= threshold, 0, np.where(shift <= -threshold, 2, 1))
    labels[np.arange(len(cls)), cls] = 1.0
    return labels


def _tracks(records: Iterable[TrajectoryRecord]) -> dict[int, dict[int, TrajectoryRecord]]:
    tracks: dict[int, dict[int, TrajectoryRecord]] = defaultdict(dict)
    for r in records:
        tracks[r.vehicle_id][r.frame] = r
    return tracks


def assign_slots(target: TrajectoryRecord, candidates: Sequence[TrajectoryRecord]) -> dict[str, int]:
    """Nearest vehicle per relative slot at the reference frame; returns slot -> vehicle id."""
    best: dict[str, tuple[float, int]] = {}
    for c in candidates:
        dx = c.x - target.x
        if c.lane_id == target.lane_id:
            side = ""
        elif c.lane_id == target.lane_id - 1:
            side = "L"
        elif c.lane_id == target.lane_id + 1:
            side = "R"
        else:
            continue
        slot = side + ("P" if dx > 0 else "F")
        key = (abs(dx), c.vehicle_id)
        if slot not in best or key < best[slot]:
            best[slot] = key
    return {s: best[s][1] for s in SLOTS if s in best}


def window_scenarios(records: Sequence[TrajectoryRecord], neighborhood: int = 6, stride: int = 80,
                     hist_len: int = HIST_LEN, fut_len: int = FUT_LEN, min_neighbors: int = 0,
                     intent_threshold: float = 1.5, targets: Iterable[int] | None = None,
                     stats: dict | None = None) -> list[ScenarioBatch]:
    """Slide (hist_len + fut_len)-frame windows over every target vehicle.

    Coordinates are re-expressed relative to the target's last history
    position. Targets shorter than one window are skipped and counted in
    ``stats['short_targets']``.
    """
    tracks = _tracks(records)
    win = hist_len + fut_len
    stats = {} if stats is None else stats
    stats.setdefault("short_targets", 0)
    stats.setdefault("gapped_windows", 0)
    out = []
    wanted = sorted(tracks) if targets is None else list(targets)
    for vid in wanted:
        frames = sorted(tracks[vid])
        if len(frames) < win:
            stats["short_targets"] += 1
            continue
        for s in range(0, len(frames) - win + 1, stride):
            f0 = frames[s]
            if frames[s + win - 1] - f0 != win - 1:
                stats["gapped_windows"] += 1
                continue
            window = range(f0, f0 + win)
            ref = tracks[vid][f0 + hist_len - 1]
            cands = [tracks[o][ref.frame] for o in tracks
                     if o != vid and all(f in tracks[o] for f in window)]
            slots = assign_slots(ref, cands)
            chosen = list(slots.items())[:neighborhood]
            if len(chosen) < min_neighbors:
                continue
            ids = [vid] + [v for _, v in chosen]
            arr = np.array([[[tracks[v][f].x, tracks[v][f].y, tracks[v][f].vx, tracks[v][f].vy]
                             for v in ids] for f in window])
            arr[:, :, 0] -= ref.x
            arr[:, :, 1] -= ref.y
            hist = arr[:hist_len]
            fut = arr[hist_len:, :, :2].copy()
            out.append(ScenarioBatch(
                history=hist, future_truth=fut, neighbor_mask=np.ones(len(ids), dtype=bool),
                intention_labels=intention_labels(hist, fut, intent_threshold),
                slots=("TAR",) + tuple(s for s, _ in chosen), vehicle_ids=tuple(ids),
                origin=(ref.x, ref.y), start_frame=f0))
    return out


def history_only_scenario(records: Sequence[TrajectoryRecord], target: int | None = None,
                          hist_len: int = HIST_LEN, neighborhood: int = 6) -> ScenarioBatch:
    """Scenario from the last ``hist_len`` frames of ``target`` (no future truth).

    The future is filled with zeros and the labels with 'keep'.
    """
    tracks = _tracks(records)
    if not tracks:
        raise IngestError("no records")
    vid = min(tracks) if target is None else target
    if vid not in tracks:
        raise IngestError(f"target vehicle {vid} not present")
    frames = sorted(tracks[vid])
    if len(frames) < hist_len:
        raise IngestError(f"target {vid} has {len(frames)} frames, needs {hist_len}")
    window = frames[-hist_len:]
    ref = tracks[vid][window[-1]]
    cands = [tracks[o][ref.frame] for o in tracks if o != vid and all(f in tracks[o] for f in window)]
    chosen = list(assign_slots(ref, cands).items())[:neighborhood]
    ids = [vid] + [v for _, v in chosen]
    hist = np.array([[[tracks[v][f].x - ref.x, tracks[v][f].y - ref.y, tracks[v][f].vx, tracks[v][f].vy]
                      for v in ids] for f in window])
    n = len(ids)
    labels = np.zeros((n, 3))
    labels[:, 1] = 1.0
    return ScenarioBatch(hist, np.zeros((FUT_LEN, n, 2)), np.ones(n, dtype=bool), labels,
                         slots=("TAR",) + tuple(s for s, _ in chosen), vehicle_ids=tuple(ids),
                         origin=(ref.x, ref.y), start_frame=window[0])


def load_scenarios(data_dir, min_neighbors: int = 0, neighborhood: int = 6, stride: int = 80,
                   intent_threshold: float = 1.5) -> list[ScenarioBatch]:
    """Window every canonical CSV in ``data_dir`` independently (sorted by name)."""
    files = sorted(Path(data_dir).glob("*.csv"))
    if not files:
        raise IngestError(f"no CSV files in {data_dir}")
    out = []
    for f in files:
        out.extend(window_scenarios(ingest(f), neighborhood=neighborhood, stride=stride,
                                    min_neighbors=min_neighbors, intent_threshold=intent_threshold))
    return out


def split_scenarios(scenarios: Sequence, seed: int, train_fraction: float = 0.7):
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(scenarios))
    cut = int(round(train_fraction * len(scenarios)))
    return [scenarios[i] for i in order[:cut]], [scenarios[i] for i in order[cut:]]


# ---- batching -----------------------------------------------------------

@dataclass
class Batch:
    history: np.ndarray      # [T, Ntot, 4]
    future: np.ndarray       # [F, Ntot, 2]
    adjacency: np.ndarray    # [Ntot, Ntot], block diagonal
    labels: np.ndarray       # [Ntot, 3]
    mask: np.ndarray         # [Ntot]
    blocks: list = field(default_factory=list)  # (offset, n) per scenario

    @property
    def n(self) -> int:
        return self.history.shape[1]

    def future_anchor(self, steps: int = FUT_LEN) -> np.ndarray:
        return kinematic_anchor(self.history, steps)

    def past_anchor(self) -> np.ndarray:
        return past_kinematic_anchor(self.history)


def collate(scenarios: Sequence[ScenarioBatch]) -> Batch:
    """Stack scenarios as disconnected blocks of one fully connected graph each."""
    sizes = [s.n_agents for s in scenarios]
    total = sum(sizes)
    adj = np.zeros((total, total))
    blocks, off = [], 0
    for n in sizes:
        adj[off:off + n, off:off + n] = 1.0
        blocks.append((off, n))
        off += n
    return Batch(
        history=np.concatenate([s.history for s in scenarios], axis=1),
        future=np.concatenate([s.future_truth for s in scenarios], axis=1),
        adjacency=adj,
        labels=np.concatenate([s.intention_labels for s in scenarios], axis=0),
        mask=np.concatenate([s.neighbor_mask for s in scenarios]),
        blocks=blocks,
    )


def kinematic_anchor(history: np.ndarray, steps: int = FUT_LEN, dt: float = DT) -> np.ndarray:
    """Constant-velocity extrapolation of the last history state, [steps, N, 2]."""
    last = history[-1]
    k = np.arange(1, steps + 1)[:, None, None] * dt
    return last[None, :, :2] + k * last[None, :, 2:4]


def past_kinematic_anchor(history: np.ndarray, dt: float = DT) -> np.ndarray:
    """The same constant-velocity line evaluated over the history frames, [T, N, 2]."""
    last = history[-1]
    t = history.shape[0]
    k = (np.arange(t) - (t - 1))[:, None, None] * dt
    return last[None, :, :2] + k * last[None, :, 2:4]


def history_features(history: np.ndarray) -> np.ndarray:
    """Scaled [T, N, 4] inputs for the networks."""
    return np.concatenate([history[..., :2] / POS_SCALE, history[..., 2:4] / VEL_SCALE], axis=-1)


# ---- synthetic scenes ---------------------------------------------------

LANE_WIDTH = 3.5
SCENE_KINDS = ("cruise", "lane_change", "following")


def _lane_of(y: float, n_lanes: int = 3) -> int:
    # lane 1 is the leftmost lane, centered at the largest y
    idx = int(round((n_lanes - 1) - y / LANE_WIDTH))
    return min(max(idx, 0), n_lanes - 1) + 1


def synth_scene(rng: np.random.Generator, kind: str, scene_id: int, frames: int = 80,
                frame_offset: int = 0) -> list[TrajectoryRecord]:
    """Seven vehicles around a lane-2 target: TAR, P, F, LP, LF, RP, RF."""
    lane_y = {1: 2 * LANE_WIDTH, 2: LANE_WIDTH, 3: 0.0}
    layout = [("TAR", 2, 0.0), ("P", 2, 25.0), ("F", 2, -25.0), ("LP", 1, 18.0),
              ("LF", 1, -20.0), ("RP", 3, 22.0), ("RF", 3, -18.0)]
    n = len(layout)
    base_speed = rng.uniform(24.0, 32.0)
    x = np.array([dx + rng.uniform(-3.0, 3.0) for _, _, dx in layout])
    y = np.array([lane_y[lane] + rng.uniform(-0.2, 0.2) for _, lane, _ in layout])
    v = base_speed + rng.uniform(-2.0, 2.0, size=n)
    t = np.arange(frames) * DT
    xs = np.zeros((frames, n))
    ys = np.zeros((frames, n))
    vxs = np.zeros((frames, n))
    vys = np.zeros((frames, n))

    if kind == "following":
        # lane-2 platoon P -> TAR -> F reacts to a speed wave of P
        amp = rng.uniform(2.0, 4.0)
        period = rng.uniform(4.0, 7.0)
        vel = v.copy()
        pos = x.copy()
        gains = {0: 1, 2: 0}  # follower -> leader index within layout
        for k in range(frames):
            xs[k], vxs[k] = pos, vel
            acc = np.zeros(n)
            acc[1] = amp * (2 * math.pi / period) * math.cos(2 * math.pi * t[k] / period)
            for f, lead in gains.items():
                gap = pos[lead] - pos[f]
                acc[f] = 0.25 * (gap - 20.0) + 0.8 * (vel[lead] - vel[f])
            vel = vel + acc * DT
            pos = pos + vel * DT
        ys[:] = y
    else:
        xs[:] = x + v * t[:, None]
        vxs[:] = v
        ys[:] = y
        if kind == "lane_change":
            who = int(rng.integers(0, n))
            lane = layout[who][1]
            options = [d for d in (-1, 1) if 1 <= lane + d <= 3]
            direction = options[int(rng.integers(0, len(options)))]
            # lane index grows to the right, y grows to the left
            shift = -direction * LANE_WIDTH
            start = rng.uniform(1.0, 4.5)
            dur = rng.uniform(3.0, 4.5)
            phase = np.clip((t - start) / dur, 0.0, 1.0)
            ys[:, who] = y[who] + shift * 0.5 * (1 - np.cos(math.pi * phase))
            rate = np.where((t > start) & (t < start + dur),
                            shift * 0.5 * math.pi / dur * np.sin(math.pi * phase), 0.0)
            vys[:, who] = rate
    recs = []
    for k in range(frames):
        for j in range(n):
            recs.append(TrajectoryRecord(frame_offset + k, scene_id * 10 + j,
                                         float(xs[k, j]), float(ys[k, j]),
                                         float(vxs[k, j]), float(vys[k, j]),
                                         _lane_of(ys[k, j])))
    return recs


def synth_dataset(n_scenes: int, seed: int = 0, frames: int = 80,
                  kinds: Sequence[str] = SCENE_KINDS) -> list[list[TrajectoryRecord]]:
    rng = np.random.Generator(np.random.PCG64(seed))
    scenes = []
    for s in range(n_scenes):
        kind = kinds[s % len(kinds)]
        scenes.append(synth_scene(rng, kind, scene_id=s, frames=frames, frame_offset=s * 1000))
    return scenes


def write_synth(out_dir, n_scenes: int, seed: int = 0, frames: int = 80) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for s, recs in enumerate(synth_dataset(n_scenes, seed, frames)):
        p = out_dir / f"scene_{s:03d}.csv"
        write_canonical(p, recs)
        paths.append(p)
    return paths

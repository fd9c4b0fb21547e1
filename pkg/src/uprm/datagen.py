"""Deterministic synthetic security-video dataset generator.

Each video is a bundle of modality streams (pose graphs, scene graphs
with patch evidence, background tokens, always-present coarse tokens)
plus threat annotations: (start, end, cause) intervals at one frame per
second. Threat frames carry planted offsets in whichever streams the
video has, strong in the fine-grained streams and milder in the coarse
one, so the learning task is solvable and the fine experts carry real
marginal signal.

Everything derives from (profile, seed) through per-video tagged
sub-seeds, so generation order and worker count never change the data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .experts import N_JOINTS, PoseGraphSequence, SceneGraph, make_pose_graph
from .seeding import derive_rng

TOKEN_DIM = 16  # raw width of coarse and background frame tokens
PATCH_FEATURE_DIM = 4
PATCHES_PER_FRAME = 16  # 4x4 grid

THREAT_CATEGORY = 0  # entity category planted on threat frames
N_ENTITY_CATEGORIES = 6

# Default plant strengths, in units of the per-dimension noise sigma.
# Coarse tokens are the only stream present in every video and the model
# classifies them frame by frame, so the coarse offset has to clear the
# 0.5 decision threshold on its own for coarse-only videos.
COARSE_PLANT = 5.0
BACKGROUND_PLANT = 2.5
CAUSE_PLANT = 1.5  # cause-specific offset; without it the cause is pure noise

CAUSE_TEMPLATES = (
    "a person fires a gun toward the doorway",
    "a vehicle collides with a pedestrian at speed",
    "a person swings a blade at another person",
    "a crowd surge breaks through a safety barrier",
    "an explosion scatters debris across the scene",
    "a person strikes another with a blunt object",
    "a fire spreads rapidly across the background",
    "a person is thrown to the ground and kicked",
)

IDENTIFY_PROMPT = "Is there any threat in this video?"
LOCATE_PROMPT = "Between which seconds does each threat occur?"
ATTRIBUTE_PROMPT = "What causes each threat?"

NO_THREAT_RESPONSE = "No threat present."
NO_INTERVALS_RESPONSE = "No threat intervals."
NO_CAUSE_RESPONSE = "No cause."


@dataclass
class GenProfile:
    name: str
    video_count: int
    pose_presence_rate: float
    background_presence_rate: float
    relation_presence_rate: float
    frames_per_video: int = 64  # 1 frame = 1 second
    threat_rate: float = 0.5
    cause_vocab_size: int = 8
    seed: int = 0
    # per-profile signal strengths; directions derive from the profile name,
    # so datasets drawn with different seeds stay mutually learnable
    coarse_plant: float = COARSE_PLANT
    background_plant: float = BACKGROUND_PLANT
    cause_plant: float = CAUSE_PLANT

    def __post_init__(self):
        for fname in ("pose_presence_rate", "background_presence_rate",
                      "relation_presence_rate", "threat_rate"):
            v = getattr(self, fname)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{fname} must be in [0, 1], got {v}")
        for fname in ("coarse_plant", "background_plant", "cause_plant"):
            v = getattr(self, fname)
            if not (np.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{fname} must be finite and >= 0, got {v}")
        if self.cause_vocab_size < 1 or self.cause_vocab_size > len(CAUSE_TEMPLATES):
            raise ConfigError(
                f"cause_vocab_size must be in [1, {len(CAUSE_TEMPLATES)}], "
                f"got {self.cause_vocab_size}"
            )


def builtin_profile(name: str, video_count: int = 250, seed: int = 0,
                    **overrides) -> GenProfile:
    """The named modality-mix presets; extra keyword fields override."""
    presets = {
        # dataset-wide modality shares mirroring the two corpora mixes
        "cuva-like": dict(pose_presence_rate=0.46, background_presence_rate=0.22,
                          relation_presence_rate=0.32),
        "ucfc-like": dict(pose_presence_rate=0.41, background_presence_rate=0.31,
                          relation_presence_rate=0.28),
        # one dominant fine modality and a coarse stream too weak to carry
        # detection alone; the setting where gating has to earn its keep
        # instead of averaging null tokens into every frame
        "imbalance-stress": dict(pose_presence_rate=0.9,
                                 background_presence_rate=0.15,
                                 relation_presence_rate=0.15,
                                 coarse_plant=0.8),
    }
    if name not in presets:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(presets)}"
        )
    kw = dict(presets[name])
    kw.update(overrides)
    return GenProfile(name=name, video_count=video_count, seed=seed, **kw)


@dataclass(eq=False)
class SyntheticVideo:
    id: int
    poses: PoseGraphSequence
    scenes: list  # Optional[SceneGraph] per frame
    background: Optional[np.ndarray]  # n x TOKEN_DIM or None
    coarse_frames: np.ndarray  # n x TOKEN_DIM
    ground_truth: list  # (start_s, end_s, cause_id)
    per_frame_labels: np.ndarray  # 0/1 ints
    patches: Optional[list] = None  # per-frame PATCHES_PER_FRAME x PATCH_FEATURE_DIM

    @property
    def n_frames(self) -> int:
        return self.coarse_frames.shape[0]

    def frame_cause(self, t: int) -> Optional[int]:
        for s, e, c in self.ground_truth:
            if s <= t < e:
                return c
        return None


@dataclass
class InstructionRecord:
    video_id: int
    identify_prompt: str
    identify_response: str
    locate_prompt: str
    locate_response: str
    attribute_prompt: str
    attribute_response: str


def _plant_direction(profile_name: str, stream: str) -> np.ndarray:
    # keyed by profile name, not seed: what a threat looks like is a fixed
    # property of the synthetic world, the seed only varies the draws
    v = derive_rng(profile_name, "plant", stream).normal(size=TOKEN_DIM)
    return v / np.linalg.norm(v)


def _quota_members(seed, tag: str, count: int, rate: float) -> np.ndarray:
    """Boolean membership: exactly round(rate*count) ids selected."""
    k = int(round(rate * count))
    chosen = derive_rng(seed, "presence", tag).permutation(count)[:k]
    member = np.zeros(count, dtype=bool)
    member[chosen] = True
    return member


def _draw_intervals(rng, n_frames: int, cause_vocab: int) -> list:
    length = int(rng.integers(3, min(9, n_frames + 1)))
    start = int(rng.integers(0, n_frames - length + 1))
    out = [(start, start + length, int(rng.integers(0, cause_vocab)))]
    if rng.random() < 0.4:
        length2 = int(rng.integers(3, 9))
        lo = out[0][1] + 2
        if lo + length2 <= n_frames:
            s2 = int(rng.integers(lo, n_frames - length2 + 1))
            out.append((s2, s2 + length2, int(rng.integers(0, cause_vocab))))
    return out


def _threat_joints(rng) -> np.ndarray:
    return rng.uniform(0.02, 0.45, size=(N_JOINTS, 2))


def _normal_joints(rng) -> np.ndarray:
    return rng.uniform(0.35, 0.95, size=(N_JOINTS, 2))


def _random_bbox(rng):
    x, y = rng.uniform(0.0, 0.6, size=2)
    w = rng.uniform(0.1, min(0.4, 1.0 - x))
    h = rng.uniform(0.1, min(0.4, 1.0 - y))
    return (float(x), float(y), float(w), float(h))


def _frame_scene(rng, threat: bool) -> Optional[SceneGraph]:
    n_extra = int(rng.integers(0, 4))
    entities = []
    if threat:
        entities.append((THREAT_CATEGORY, _random_bbox(rng)))
    for _ in range(n_extra):
        cat = int(rng.integers(1, N_ENTITY_CATEGORIES))
        entities.append((cat, _random_bbox(rng)))
    if not entities:
        return None
    m = len(entities)
    relations = []
    if m > 1:
        for _ in range(int(rng.integers(0, 7))):
            s, o = rng.integers(0, m, size=2)
            if s != o:
                relations.append((int(s), int(rng.integers(0, 4)), int(o)))
    return SceneGraph(entities, relations[:6])


def _gen_video(profile: GenProfile, vid: int, has_pose: bool, has_bg: bool,
               has_rel: bool, has_threat: bool, u_coarse, u_bg,
               u_causes) -> SyntheticVideo:
    n = profile.frames_per_video
    seed = profile.seed

    intervals = []
    if has_threat:
        intervals = _draw_intervals(derive_rng(seed, vid, "intervals"), n,
                                    profile.cause_vocab_size)
    labels = np.zeros(n, dtype=np.int64)
    for s, e, _ in intervals:
        labels[s:e] = 1

    coarse = derive_rng(seed, vid, "coarse").normal(size=(n, TOKEN_DIM))
    coarse[labels == 1] += profile.coarse_plant * u_coarse
    for s, e, c in intervals:
        coarse[s:e] += profile.cause_plant * u_causes[c]

    background = None
    if has_bg:
        background = derive_rng(seed, vid, "background").normal(size=(n, TOKEN_DIM))
        background[labels == 1] += profile.background_plant * u_bg

    if has_pose:
        rng_p = derive_rng(seed, vid, "pose")
        frames = [
            make_pose_graph(_threat_joints(rng_p) if labels[t] else
                            _normal_joints(rng_p))
            for t in range(n)
        ]
    else:
        frames = [None] * n
    poses = PoseGraphSequence(frames)

    scenes = [None] * n
    patches = None
    if has_rel:
        rng_s = derive_rng(seed, vid, "scenes")
        rng_patch = derive_rng(seed, vid, "patches")
        scenes = [_frame_scene(rng_s, bool(labels[t])) for t in range(n)]
        patches = [
            rng_patch.normal(size=(PATCHES_PER_FRAME, PATCH_FEATURE_DIM))
            if g is not None else None
            for g in scenes
        ]

    return SyntheticVideo(
        id=vid, poses=poses, scenes=scenes, background=background,
        coarse_frames=coarse, ground_truth=intervals,
        per_frame_labels=labels, patches=patches,
    )


def generate_dataset(profile: GenProfile) -> list:
    if profile.video_count < 1:
        raise ConfigError(f"video_count must be >= 1, got {profile.video_count}")
    if profile.frames_per_video < 1:
        raise ConfigError(
            f"frames_per_video must be >= 1, got {profile.frames_per_video}"
        )
    n = profile.video_count
    has_pose = _quota_members(profile.seed, "pose", n, profile.pose_presence_rate)
    has_bg = _quota_members(profile.seed, "background", n,
                            profile.background_presence_rate)
    has_rel = _quota_members(profile.seed, "relation", n,
                             profile.relation_presence_rate)
    has_threat = _quota_members(profile.seed, "threat", n, profile.threat_rate)
    u_coarse = _plant_direction(profile.name, "coarse")
    u_bg = _plant_direction(profile.name, "background")
    u_causes = np.stack([
        _plant_direction(profile.name, f"cause{c}")
        for c in range(profile.cause_vocab_size)
    ])

    from .parallel import ordered_map

    return ordered_map(
        lambda i: _gen_video(profile, i, bool(has_pose[i]), bool(has_bg[i]),
                             bool(has_rel[i]), bool(has_threat[i]),
                             u_coarse, u_bg, u_causes),
        range(n),
    )


def modality_rates(videos) -> dict:
    """Empirical per-video presence fractions, for Fig.-2-style summaries."""
    n = len(videos)
    return {
        "pose": sum(any(g is not None for g in v.poses.frames) for v in videos) / n,
        "background": sum(v.background is not None for v in videos) / n,
        "relation": sum(any(g is not None for g in v.scenes) for v in videos) / n,
        "threat": sum(bool(v.ground_truth) for v in videos) / n,
    }


def render_instructions(video: SyntheticVideo) -> InstructionRecord:
    """Fill the three prompt/response templates from the annotations."""
    intervals = sorted(video.ground_truth, key=lambda t: t[0])
    if intervals:
        identify = "Yes, a threat is present."
        locate = " ".join(
            f"A threat occurs between {s} and {e} seconds." for s, e, _ in intervals
        )
        attribute = " ".join(
            f"The threat is caused by {CAUSE_TEMPLATES[c]}." for _, _, c in intervals
        )
    else:
        identify = NO_THREAT_RESPONSE
        locate = NO_INTERVALS_RESPONSE
        attribute = NO_CAUSE_RESPONSE
    return InstructionRecord(
        video_id=video.id,
        identify_prompt=IDENTIFY_PROMPT, identify_response=identify,
        locate_prompt=LOCATE_PROMPT, locate_response=locate,
        attribute_prompt=ATTRIBUTE_PROMPT, attribute_response=attribute,
    )


# ---------------------------------------------------------------------------
# dataset files: newline-delimited, one self-describing record per line


FORMAT_NAME = "uprm-ds"
FORMAT_VERSION = 1


def _video_to_record(v: SyntheticVideo) -> dict:
    return {
        "id": v.id,
        "joints": [None if g is None else g.joints.tolist()
                   for g in v.poses.frames],
        "scenes": [
            None if g is None else {
                "entities": [[cat, list(bbox)] for cat, bbox in g.entities],
                "relations": [list(t) for t in g.relations],
            }
            for g in v.scenes
        ],
        "background": None if v.background is None else v.background.tolist(),
        "coarse": v.coarse_frames.tolist(),
        "patches": None if v.patches is None else [
            None if p is None else p.tolist() for p in v.patches
        ],
        "ground_truth": [list(t) for t in v.ground_truth],
        "labels": v.per_frame_labels.tolist(),
    }


def _video_from_record(rec: dict) -> SyntheticVideo:
    poses = PoseGraphSequence([
        None if j is None else make_pose_graph(np.asarray(j, dtype=np.float64))
        for j in rec["joints"]
    ])
    scenes = [
        None if s is None else SceneGraph(
            [(int(cat), tuple(bbox)) for cat, bbox in s["entities"]],
            [tuple(int(x) for x in t) for t in s["relations"]],
        )
        for s in rec["scenes"]
    ]
    patches = rec["patches"]
    if patches is not None:
        patches = [None if p is None else np.asarray(p, dtype=np.float64)
                   for p in patches]
    return SyntheticVideo(
        id=int(rec["id"]),
        poses=poses,
        scenes=scenes,
        background=(None if rec["background"] is None
                    else np.asarray(rec["background"], dtype=np.float64)),
        coarse_frames=np.asarray(rec["coarse"], dtype=np.float64),
        ground_truth=[tuple(int(x) for x in t) for t in rec["ground_truth"]],
        per_frame_labels=np.asarray(rec["labels"], dtype=np.int64),
        patches=patches,
    )


def write_dataset(videos, path, profile: Optional[GenProfile] = None) -> None:
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
    if profile is not None:
        header["profile"] = {
            "name": profile.name, "video_count": profile.video_count,
            "frames_per_video": profile.frames_per_video,
            "pose_presence_rate": profile.pose_presence_rate,
            "background_presence_rate": profile.background_presence_rate,
            "relation_presence_rate": profile.relation_presence_rate,
            "threat_rate": profile.threat_rate,
            "cause_vocab_size": profile.cause_vocab_size,
            "seed": profile.seed,
            "coarse_plant": profile.coarse_plant,
            "background_plant": profile.background_plant,
            "cause_plant": profile.cause_plant,
        }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for v in videos:
            fh.write(json.dumps(_video_to_record(v), sort_keys=True) + "\n")


def read_dataset(path) -> list:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{path}: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line 1: bad header record ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DataError(f"{path}: line 1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(
            f"{path}: unsupported {FORMAT_NAME} version {header.get('version')!r}, "
            f"expected {FORMAT_VERSION}"
        )
    videos = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            videos.append(_video_from_record(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(
                f"{path}: line {i}: malformed video record ({exc}); "
                f"last good line was {i - 1}"
            ) from exc
    return videos


def videos_equal(a: SyntheticVideo, b: SyntheticVideo) -> bool:
    """Structural equality, array fields compared exactly."""
    if a.id != b.id or a.ground_truth != b.ground_truth:
        return False
    if not np.array_equal(a.per_frame_labels, b.per_frame_labels):
        return False
    if not np.array_equal(a.coarse_frames, b.coarse_frames):
        return False
    if (a.background is None) != (b.background is None):
        return False
    if a.background is not None and not np.array_equal(a.background, b.background):
        return False
    for ga, gb in zip(a.poses.frames, b.poses.frames):
        if (ga is None) != (gb is None):
            return False
        if ga is not None and not (np.array_equal(ga.joints, gb.joints)
                                   and ga.edges == gb.edges):
            return False
    for sa, sb in zip(a.scenes, b.scenes):
        if (sa is None) != (sb is None):
            return False
        if sa is not None and not (sa.entities == sb.entities
                                   and sa.relations == sb.relations):
            return False
    pa = a.patches or []
    pb = b.patches or []
    if len(pa) != len(pb):
        return False
    for xa, xb in zip(pa, pb):
        if (xa is None) != (xb is None):
            return False
        if xa is not None and not np.array_equal(xa, xb):
            return False
    return len(a.poses.frames) == len(b.poses.frames) and len(a.scenes) == len(b.scenes)

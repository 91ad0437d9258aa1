"""Procedural paired (features, captions) data plus unpaired audio-only pools.

Clips are sums of Gaussian time-frequency bumps (one per sound event) with
i.i.d. Gaussian background noise. Captions are produced by a small
deterministic grammar over the event names, giving an exact semantic oracle:
a generated caption is "right" iff it mentions exactly the clip's events.

Everything is reproducible: a clip is fully determined by (world config,
dataset seed, clip index), and generation order never matters.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from math import perm
from pathlib import Path

import numpy as np

from .utils import atomic_write_bytes, atomic_write_json, derive_rng

BOS, EOS, PAD, UNK = 0, 1, 2, 3
_SPECIALS = ["<bos>", "<eos>", "<pad>", "<unk>"]

EVENT_NAMES = [
    "dog", "siren", "bell", "drum", "bird", "horn", "rain", "clap",
    "owl", "train", "wind", "chime",
]

# words used by the caption grammar below, in fixed vocabulary order
_GRAMMAR_WORDS = [
    "a", "followed", "by", "then", "the", "sound", "of", "and",
    "is", "heard", "before",
]

N_TEMPLATES_AVAILABLE = 4


class VocabularyError(ValueError):
    """An event id or token id falls outside the world's vocabulary."""


@dataclass(frozen=True)
class WorldConfig:
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 200
    n_audio_only: int = 2000
    n_frames: int = 100
    n_mels: int = 16
    n_event_types: int = 8
    noise_sigma: float = 0.1
    n_caption_templates: int = 2
    max_events: int = 3
    min_event_frames: int = 14
    max_event_frames: int = 30

    def validate(self):
        if min(self.n_train, self.n_val, self.n_test) <= 0 or self.n_audio_only < 0:
            raise ValueError("split sizes must be positive (audio-only may be 0)")
        if self.n_event_types < 4:
            raise ValueError("need at least 4 event types")
        if self.n_event_types > len(EVENT_NAMES):
            raise ValueError(f"at most {len(EVENT_NAMES)} event types supported")
        if not (1 <= self.n_caption_templates <= N_TEMPLATES_AVAILABLE):
            raise ValueError(f"n_caption_templates must be in [1, {N_TEMPLATES_AVAILABLE}]")
        if not (1 <= self.max_events <= 3):
            raise ValueError("max_events must be in [1, 3]")
        if self.n_frames // self.max_events <= self.min_event_frames:
            raise ValueError("frames per event segment too small for min_event_frames")


@dataclass
class EventType:
    """A sound-event archetype: spectral profile plus temporal envelope shape."""

    id: int
    name: str
    profile: np.ndarray  # (n_mels,), peak 1.0

    def render(self, n_frames: int, onset: int, duration: int) -> np.ndarray:
        """Place this event's time-frequency bump in an empty (T, F) canvas."""
        out = np.zeros((n_frames, len(self.profile)), dtype=np.float32)
        j = np.arange(duration, dtype=np.float64)
        envelope = np.sin(np.pi * (j + 0.5) / duration)
        out[onset : onset + duration] = np.outer(envelope, self.profile).astype(np.float32)
        return out


def make_event_types(n_events: int, n_mels: int) -> list[EventType]:
    """Fixed, seed-independent event bank with pairwise-distinguishable profiles."""
    events = []
    centers = (np.arange(n_events) + 0.5) * n_mels / n_events
    for e in range(n_events):
        width = 0.8 + 0.15 * (e % 3)
        f = np.arange(n_mels, dtype=np.float64)
        profile = np.exp(-((f - centers[e]) ** 2) / (2.0 * width**2))
        events.append(EventType(id=e, name=EVENT_NAMES[e], profile=profile.astype(np.float32)))
    for a in range(n_events):
        for b in range(a + 1, n_events):
            pa, pb = events[a].profile, events[b].profile
            cos = float(pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb)))
            if cos >= 0.9:
                raise ValueError(f"event profiles {a},{b} too similar (cos={cos:.3f})")
    return events


@dataclass
class SynthClip:
    features: np.ndarray  # (T, F) float32
    events: list  # ordered [(event_id, onset, duration), ...]
    seed: int  # global clip index within the dataset

    @property
    def event_ids(self):
        return [e for e, _, _ in self.events]


@dataclass
class CaptionSet:
    references: list  # list of token-id lists, BOS ... EOS


class VocabTokenizer:
    """Whitespace tokenizer over the world's closed vocabulary.

    BOS=0, EOS=1, PAD=2, UNK=3 are fixed. `tokenize(detokenize(ids)) == ids`
    for any in-vocabulary sequence.
    """

    def __init__(self, n_event_types: int):
        words = EVENT_NAMES[:n_event_types] + _GRAMMAR_WORDS
        self.id_to_token = _SPECIALS + words
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.event_name_ids = {
            self.token_to_id[EVENT_NAMES[e]]: e for e in range(n_event_types)
        }

    def __len__(self):
        return len(self.id_to_token)

    def tokenize(self, text: str) -> list:
        ids = [BOS]
        for word in text.lower().split():
            ids.append(self.token_to_id.get(word, UNK))
        ids.append(EOS)
        return ids

    def detokenize(self, ids) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i in (BOS, EOS, PAD):
                continue
            if i < 0 or i >= len(self.id_to_token):
                raise VocabularyError(f"token id {i} outside vocabulary of {len(self)}")
            words.append(self.id_to_token[i])
        return " ".join(words)

    def event_ids_in(self, token_ids) -> list:
        """Ordered event ids mentioned by a token sequence (semantic oracle)."""
        return [self.event_name_ids[int(t)] for t in token_ids if int(t) in self.event_name_ids]


def caption_text(event_names: list, template_id: int) -> str:
    """Deterministic caption grammar over ordered event names."""
    if not 1 <= len(event_names) <= 3:
        raise ValueError("caption grammar covers 1-3 events")
    if template_id == 0:
        return " followed by ".join(f"a {n}" for n in event_names)
    if template_id == 1:
        return " then ".join(event_names)
    if template_id == 2:
        rest = "".join(f" and then a {n}" for n in event_names[1:])
        return f"the sound of a {event_names[0]}{rest}"
    if template_id == 3:
        rest = "".join(f" before a {n}" for n in event_names[1:])
        return f"a {event_names[0]} is heard{rest}"
    raise ValueError(f"unknown template id {template_id}")


class World:
    """Event bank + tokenizer + clip/caption generators for one config."""

    def __init__(self, cfg: WorldConfig):
        cfg.validate()
        self.cfg = cfg
        self.events = make_event_types(cfg.n_event_types, cfg.n_mels)
        self.tokenizer = VocabTokenizer(cfg.n_event_types)

    def caption_for(self, event_ids, template_id: int) -> list:
        """Token-id caption for an ordered event list under one template."""
        if template_id >= N_TEMPLATES_AVAILABLE:
            raise ValueError(f"template_id {template_id} out of range")
        names = []
        for e in event_ids:
            if not 0 <= e < self.cfg.n_event_types:
                raise VocabularyError(f"unknown event id {e}")
            names.append(self.events[e].name)
        return self.tokenizer.tokenize(caption_text(names, template_id))

    def captions_for(self, clip: SynthClip) -> CaptionSet:
        return CaptionSet(
            references=[
                self.caption_for(clip.event_ids, t)
                for t in range(self.cfg.n_caption_templates)
            ]
        )

    def make_clip(self, dataset_seed: int, index: int) -> SynthClip:
        """Clip `index` of the dataset; independent of generation order."""
        cfg = self.cfg
        rng = derive_rng(dataset_seed, "clip", index)
        n_ev = int(rng.integers(1, cfg.max_events + 1))
        ids = rng.choice(cfg.n_event_types, size=n_ev, replace=False)
        seg = cfg.n_frames // n_ev
        events = []
        feats = np.zeros((cfg.n_frames, cfg.n_mels), dtype=np.float32)
        for i, e in enumerate(ids):
            dur_hi = min(cfg.max_event_frames, seg - 1)
            duration = int(rng.integers(cfg.min_event_frames, dur_hi + 1))
            onset = i * seg + int(rng.integers(0, seg - duration + 1))
            events.append((int(e), onset, duration))
            feats += self.events[int(e)].render(cfg.n_frames, onset, duration)
        if cfg.noise_sigma > 0:
            feats += rng.normal(0.0, cfg.noise_sigma, feats.shape).astype(np.float32)
        return SynthClip(features=feats, events=events, seed=index)


@dataclass
class DatasetSplit:
    config: WorldConfig
    seed: int
    train: list  # [(SynthClip, CaptionSet), ...]
    val: list
    test: list
    audio_only: list  # [SynthClip, ...]
    world: World = field(repr=False, default=None)

    @property
    def tokenizer(self):
        return self.world.tokenizer

    def all_clips(self):
        for clip, _ in self.train + self.val + self.test:
            yield clip
        yield from self.audio_only


def distinct_event_sequences(cfg: WorldConfig) -> int:
    return sum(perm(cfg.n_event_types, n) for n in range(1, cfg.max_events + 1))


def generate_dataset(cfg: WorldConfig, seed: int) -> DatasetSplit:
    """Build paired train/val/test splits plus the audio-only pool.

    Deterministic for fixed (cfg, seed); clip indices are global so splits are
    disjoint by construction.
    """
    world = World(cfg)
    diversity = distinct_event_sequences(cfg)
    if cfg.n_train > 10 * diversity:
        warnings.warn(
            f"requested {cfg.n_train} paired clips but only {diversity} distinct "
            "event sequences exist; captions will repeat heavily",
            stacklevel=2,
        )

    def paired(start, count):
        out = []
        for i in range(start, start + count):
            clip = world.make_clip(seed, i)
            out.append((clip, world.captions_for(clip)))
        return out

    train = paired(0, cfg.n_train)
    val = paired(cfg.n_train, cfg.n_val)
    test = paired(cfg.n_train + cfg.n_val, cfg.n_test)
    pool_start = cfg.n_train + cfg.n_val + cfg.n_test
    audio_only = [world.make_clip(seed, i) for i in range(pool_start, pool_start + cfg.n_audio_only)]
    return DatasetSplit(config=cfg, seed=seed, train=train, val=val, test=test,
                        audio_only=audio_only, world=world)


# ---------------------------------------------------------------------------
# persistence: JSON manifest + raw little-endian float32 feature blob

MANIFEST_NAME = "manifest.json"
FEATURES_NAME = "features.bin"


def save_dataset(split: DatasetSplit, out_dir) -> None:
    out_dir = Path(out_dir)
    cfg = split.config
    clips_meta = []
    payload = bytearray()
    frame_bytes = cfg.n_frames * cfg.n_mels * 4

    def emit(clip: SynthClip, split_name: str, captions: CaptionSet | None):
        entry = {
            "index": clip.seed,
            "split": split_name,
            "events": [[int(e), int(o), int(d)] for e, o, d in clip.events],
            "offset": len(payload),
            "references": None if captions is None else [list(map(int, r)) for r in captions.references],
        }
        feats = np.ascontiguousarray(clip.features, dtype="<f4")
        assert feats.nbytes == frame_bytes
        payload.extend(feats.tobytes())
        clips_meta.append(entry)

    for name, rows in (("train", split.train), ("val", split.val), ("test", split.test)):
        for clip, caps in rows:
            emit(clip, name, caps)
    for clip in split.audio_only:
        emit(clip, "audio_only", None)

    manifest = {
        "schema_version": 1,
        "seed": split.seed,
        "world": {k: getattr(cfg, k) for k in WorldConfig.__dataclass_fields__},
        "feature_dtype": "float32-le",
        "frame_shape": [cfg.n_frames, cfg.n_mels],
        "clips": clips_meta,
    }
    atomic_write_json(out_dir / MANIFEST_NAME, manifest)
    atomic_write_bytes(out_dir / FEATURES_NAME, bytes(payload))


def load_dataset(data_dir) -> DatasetSplit:
    import json

    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no dataset manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    cfg = WorldConfig(**manifest["world"])
    world = World(cfg)
    blob = np.fromfile(data_dir / FEATURES_NAME, dtype="<f4")
    t, f = manifest["frame_shape"]
    buckets = {"train": [], "val": [], "test": [], "audio_only": []}
    for entry in manifest["clips"]:
        start = entry["offset"] // 4
        feats = blob[start : start + t * f].reshape(t, f).copy()
        clip = SynthClip(features=feats,
                         events=[tuple(ev) for ev in entry["events"]],
                         seed=entry["index"])
        if entry["split"] == "audio_only":
            buckets["audio_only"].append(clip)
        else:
            caps = CaptionSet(references=entry["references"])
            buckets[entry["split"]].append((clip, caps))
    return DatasetSplit(config=cfg, seed=manifest["seed"], train=buckets["train"],
                        val=buckets["val"], test=buckets["test"],
                        audio_only=buckets["audio_only"], world=world)

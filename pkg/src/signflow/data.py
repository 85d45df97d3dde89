"""Dataset manifests, temporal resampling, flip augmentation, synthetic corpus.

The manifest is line-oriented text: a few ``#`` header directives (m_max,
target frame count, vocabulary file names) followed by one tab-separated row
per sample: id, flow cache path, space-separated glosses, space-separated
words, split tag.  Paths are relative to the manifest location.

The synthetic generator stands in for a real recording corpus: every gloss
is a moving blob with its own motion primitive (direction, speed, shape),
sentences follow a subject-verb-object grammar, and flow fields are written
analytically from the blob motion (or, behind a flag, estimated from
rendered frames to exercise the optical-flow stack end to end).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .flow import (FlowParams, FlowSequence, encode_flow, load_flow_cache,
                   save_flow_cache, video_to_flow)
from .vocab import GlossVocabulary, WordVocabulary

MANIFEST_HEADER = "# signflow-manifest v1"


@dataclass
class Sample:
    sample_id: str
    flow_path: str
    glosses: tuple
    words: tuple
    split: str


@dataclass
class DatasetManifest:
    samples: list
    m_max: float
    frames: int                      # target field count fed to the extractor
    gloss_vocab: GlossVocabulary
    word_vocab: WordVocabulary
    root: Path = None                # directory resolving relative paths

    def split(self, tag):
        return [s for s in self.samples if s.split == tag]

    def split_tags(self):
        return sorted({s.split for s in self.samples})

    def sample_by_id(self, sample_id):
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(f"sample {sample_id!r} not in manifest")

    def resolve(self, sample):
        path = Path(sample.flow_path)
        return path if path.is_absolute() or self.root is None else self.root / path


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest {path} does not exist")
    headers = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != MANIFEST_HEADER:
            raise ValueError(f"{path}: not a signflow manifest")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition(" ")
                headers[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{path}: malformed row (expected 5 tab-separated "
                                 f"fields): {line!r}")
            sid, flow_path, glosses, words, split = parts
            rows.append(Sample(sid, flow_path, tuple(glosses.split()),
                               tuple(words.split()), split))

    for key in ("m_max", "frames", "gloss_vocab", "word_vocab"):
        if key not in headers:
            raise ValueError(f"{path}: missing header directive '# {key} ...'")
    root = path.parent
    gloss_vocab = GlossVocabulary.load(root / headers["gloss_vocab"])
    word_vocab = WordVocabulary.load(root / headers["word_vocab"])

    manifest = DatasetManifest(samples=rows, m_max=float(headers["m_max"]),
                               frames=int(headers["frames"]),
                               gloss_vocab=gloss_vocab, word_vocab=word_vocab,
                               root=root)
    for s in rows:
        for g in s.glosses:
            if g not in gloss_vocab:
                raise ValueError(f"sample {s.sample_id}: gloss {g!r} not in vocabulary")
        for w in s.words:
            if w not in word_vocab:
                raise ValueError(f"sample {s.sample_id}: word {w!r} not in vocabulary")
        if not manifest.resolve(s).exists():
            raise ValueError(f"sample {s.sample_id}: missing flow data at {s.flow_path}")
    return manifest


def save_manifest(manifest, path, gloss_name="glosses.txt", word_name="words.txt"):
    """Write the manifest row file plus its two vocabulary files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest.gloss_vocab.save(path.parent / gloss_name)
    manifest.word_vocab.save(path.parent / word_name)
    lines = [MANIFEST_HEADER,
             f"# m_max {manifest.m_max}",
             f"# frames {manifest.frames}",
             f"# gloss_vocab {gloss_name}",
             f"# word_vocab {word_name}"]
    for s in manifest.samples:
        lines.append("\t".join([s.sample_id, s.flow_path, " ".join(s.glosses),
                                " ".join(s.words), s.split]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def resample_temporal(seq, t_target):
    """Resample to exactly t_target fields: floor-index selection when longer,
    repeat of the last field when shorter (padded count recorded)."""
    n = len(seq)
    if n < 1:
        raise ValueError("resample_temporal: empty flow sequence")
    if n == t_target:
        return replace(seq, padded=0)
    if n > t_target:
        idx = (np.arange(t_target) * n) // t_target
        return replace(seq, encoded=seq.encoded[idx], padded=0)
    pad = t_target - n
    tail = np.repeat(seq.encoded[-1:], pad, axis=0)
    return replace(seq, encoded=np.concatenate([seq.encoded, tail]), padded=pad)


def augment_hflip(seq):
    """Mirror frames left-right and negate the horizontal velocity channel."""
    flipped = seq.encoded[:, :, ::-1, :].copy()
    flipped[..., 0] = 1.0 - flipped[..., 0]
    return replace(seq, encoded=flipped)


# ---------------------------------------------------------------------------
# synthetic toy sign language
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MotionPrimitive:
    direction: tuple          # unit direction (dx, dy)
    speed: float              # pixels per field
    shape: str = "disc"       # "disc" or "square"

    def velocity(self):
        dx, dy = self.direction
        norm = float(np.hypot(dx, dy)) or 1.0
        return (self.speed * dx / norm, self.speed * dy / norm)


@dataclass(frozen=True)
class GlossEntry:
    gloss: str
    words: tuple
    motion: MotionPrimitive


@dataclass
class SyntheticSignSpec:
    """Grammar and rendering parameters for the toy corpus."""
    subjects: tuple
    verbs: tuple
    objects: tuple
    fields: int = 16          # flow fields per sentence (extractor T)
    spatial: int = 32
    blob_radius: float = 4.5
    m_max: float = 4.0
    test_fraction: float = 0.0
    use_estimator: bool = False   # estimate flow from rendered frames

    def __post_init__(self):
        entries = self.entries()
        glosses = [e.gloss for e in entries]
        if len(set(glosses)) != len(glosses):
            raise ValueError("synthetic spec: duplicate gloss names")
        motions = {(e.motion.direction, e.motion.speed, e.motion.shape)
                   for e in entries}
        if len(motions) != len(entries):
            raise ValueError("synthetic spec: distinct glosses need distinct "
                             "motion primitives")

    def entries(self):
        return list(self.subjects) + list(self.verbs) + list(self.objects)

    def capacity(self):
        return len(self.subjects) * len(self.verbs) * len(self.objects)


def default_toy_spec(**overrides):
    """5 subjects x 4 verbs x 5 objects: 14 glosses, 100 possible sentences."""
    e, w, n, s = (1, 0), (-1, 0), (0, -1), (0, 1)
    ne, nw, se, sw = (1, -1), (-1, -1), (1, 1), (-1, 1)
    subjects = (
        GlossEntry("ANNA", ("anna",), MotionPrimitive(e, 3.0)),
        GlossEntry("BEN", ("ben",), MotionPrimitive(w, 3.0)),
        GlossEntry("CARLA", ("carla",), MotionPrimitive(n, 3.0)),
        GlossEntry("DAVID", ("david",), MotionPrimitive(s, 3.0)),
        GlossEntry("EVA", ("eva",), MotionPrimitive(ne, 3.0)),
    )
    verbs = (
        GlossEntry("MOVE", ("moves",), MotionPrimitive(e, 1.5, "square")),
        GlossEntry("LIFT", ("lifts",), MotionPrimitive(n, 1.5, "square")),
        GlossEntry("DROP", ("drops",), MotionPrimitive(s, 1.5, "square")),
        GlossEntry("PUSH", ("pushes",), MotionPrimitive(w, 1.5, "square")),
    )
    objects = (
        GlossEntry("BALL", ("the", "ball"), MotionPrimitive(se, 3.0)),
        GlossEntry("BOX", ("the", "box"), MotionPrimitive(sw, 3.0)),
        GlossEntry("CUP", ("the", "cup"), MotionPrimitive(nw, 3.0)),
        GlossEntry("BOOK", ("the", "book"), MotionPrimitive(ne, 1.5)),
        GlossEntry("LAMP", ("the", "lamp"), MotionPrimitive(se, 1.5, "square")),
    )
    return SyntheticSignSpec(subjects=subjects, verbs=verbs, objects=objects,
                             **overrides)


def _spans(total, parts):
    base = total // parts
    sizes = [base] * parts
    for i in range(total - base * parts):
        sizes[-(i + 1)] += 1
    return sizes


def _blob_mask(size, cy, cx, radius, shape):
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if shape == "square":
        return (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
    return np.hypot(yy - cy, xx - cx) <= radius


def render_sentence_flow(spec, entries):
    """Analytic flow fields for one gloss sequence; ground-truth motion."""
    fields = np.zeros((spec.fields, spec.spatial, spec.spatial, 2))
    spans = _spans(spec.fields, len(entries))
    center = (spec.spatial - 1) / 2.0
    t0 = 0
    for entry, span in zip(entries, spans):
        vx, vy = entry.motion.velocity()
        # start so that the trajectory stays centered over its span
        sx = center - vx * (span - 1) / 2.0
        sy = center - vy * (span - 1) / 2.0
        for i in range(span):
            cy, cx = sy + vy * i, sx + vx * i
            mask = _blob_mask(spec.spatial, cy, cx, spec.blob_radius,
                              entry.motion.shape)
            fields[t0 + i, mask, 0] = vx
            fields[t0 + i, mask, 1] = vy
        t0 += span
    return fields


def render_sentence_frames(spec, entries):
    """Grayscale frames (fields+1) of the moving blobs, for estimator mode."""
    frames = np.zeros((spec.fields + 1, spec.spatial, spec.spatial))
    spans = _spans(spec.fields, len(entries))
    center = (spec.spatial - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(spec.spatial), np.arange(spec.spatial),
                         indexing="ij")
    t = 0
    for entry, span in zip(entries, spans):
        vx, vy = entry.motion.velocity()
        sx = center - vx * (span - 1) / 2.0
        sy = center - vy * (span - 1) / 2.0
        for i in range(span + 1):
            cy, cx = sy + vy * i, sx + vx * i
            if entry.motion.shape == "square":
                d = np.maximum(np.abs(yy - cy), np.abs(xx - cx))
            else:
                d = np.hypot(yy - cy, xx - cx)
            # radial ramp gives the blob interior texture for the estimator
            frames[min(t + i, spec.fields)] = np.clip(1.0 - d / spec.blob_radius, 0.0, 1.0)
        t += span
    return frames


def generate_synthetic(spec, n_sentences, seed):
    """Deterministic toy corpus: (manifest, {sample_id: FlowSequence})."""
    capacity = spec.capacity()
    if n_sentences > capacity:
        raise ValueError(f"requested {n_sentences} sentences but the grammar "
                         f"only has {capacity}")
    rng = np.random.default_rng(seed)
    combos = [(s, v, o) for s in spec.subjects for v in spec.verbs
              for o in spec.objects]
    picked = [combos[i] for i in rng.choice(len(combos), size=n_sentences,
                                            replace=False)]

    gloss_vocab = GlossVocabulary([e.gloss for e in spec.entries()])
    word_vocab = WordVocabulary(sorted({w for e in spec.entries() for w in e.words}))

    samples, flows = [], {}
    n_test = int(round(spec.test_fraction * n_sentences))
    flow_params = FlowParams(target_size=None, pyramid_levels=3, min_level_size=8)
    for i, entries in enumerate(picked):
        sid = f"s{i:04d}"
        split = "test" if i >= n_sentences - n_test else "train"
        glosses = tuple(e.gloss for e in entries)
        words = tuple(w for e in entries for w in e.words)
        if spec.use_estimator:
            frames = render_sentence_frames(spec, entries)
            seq = video_to_flow(frames, flow_params, m_max=spec.m_max)
        else:
            fields = render_sentence_flow(spec, entries)
            encoded = np.stack([encode_flow(f, spec.m_max) for f in fields])
            seq = FlowSequence(encoded=encoded, m_max=spec.m_max)
        samples.append(Sample(sid, f"flows/{sid}.sflw", glosses, words, split))
        flows[sid] = seq

    manifest = DatasetManifest(samples=samples, m_max=spec.m_max,
                               frames=spec.fields, gloss_vocab=gloss_vocab,
                               word_vocab=word_vocab)
    return manifest, flows


def save_corpus(manifest, flows, out_dir):
    """Write a generated corpus (manifest, vocabularies, flow caches)."""
    out_dir = Path(out_dir)
    (out_dir / "flows").mkdir(parents=True, exist_ok=True)
    for sid, seq in flows.items():
        save_flow_cache(out_dir / "flows" / f"{sid}.sflw", seq)
    manifest.root = out_dir
    save_manifest(manifest, out_dir / "manifest.tsv")
    return out_dir / "manifest.tsv"


def load_sample_flow(manifest, sample):
    """Load and length-normalize one sample's encoded flow."""
    seq = load_flow_cache(manifest.resolve(sample))
    return resample_temporal(seq, manifest.frames)

"""Feature-file I/O, caption ingestion and the synthetic verification corpus.

Feature file layout (little-endian)::

    b"DFVF" | u32 version | u32 id_len | id (utf-8) | u32 N_f | u32 d_f | N_f*d_f float32

Captions are JSON Lines: ``{"video_id": str, "caption": str}`` per line.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import torch

from .errors import IngestionError
from .numkernel import RngState
from .textcodec import Vocabulary, build_vocab, encode_caption, normalize

FEATURE_MAGIC = b"DFVF"
FEATURE_VERSION = 1
FEATURE_SUFFIX = ".dfvf"


def write_feature_file(path, video_id: str, matrix) -> None:
    arr = np.ascontiguousarray(np.asarray(matrix, dtype="<f4"))
    if arr.ndim != 2:
        raise IngestionError(f"feature matrix for {video_id!r} must be 2-D, got {arr.shape}")
    vid = video_id.encode("utf-8")
    header = FEATURE_MAGIC + struct.pack("<II", FEATURE_VERSION, len(vid)) + vid
    header += struct.pack("<II", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_feature_file(path) -> tuple[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise IngestionError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, id_len = struct.unpack_from("<II", raw, 4)
        if version != FEATURE_VERSION:
            raise IngestionError(f"{path}: unsupported feature version {version}")
        off = 12 + id_len
        video_id = raw[12:off].decode("utf-8")
        n_f, d_f = struct.unpack_from("<II", raw, off)
    except struct.error as exc:
        raise IngestionError(f"{path}: truncated header") from exc
    payload = raw[off + 8:]
    if len(payload) != 4 * n_f * d_f:
        raise IngestionError(
            f"{path}: header declares {n_f}x{d_f} floats but payload has {len(payload)} bytes")
    return video_id, np.frombuffer(payload, dtype="<f4").reshape(n_f, d_f).copy()


def feature_path(features_dir, video_id: str) -> Path:
    return Path(features_dir) / f"{video_id}{FEATURE_SUFFIX}"


def read_captions(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"captions file not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rows.append({"video_id": str(obj["video_id"]), "caption": str(obj["caption"])})
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"{path}:{lineno}: malformed caption line ({exc})") from exc
    return rows


def write_captions(path, rows) -> None:
    lines = [json.dumps({"video_id": r["video_id"], "caption": r["caption"]}) for r in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@dataclass
class CaptionDataset:
    """Aligned (condition, caption) pairs; one pair per caption line."""

    video_ids: list
    features: torch.Tensor  # (n_videos, N_f, d_f)
    pair_video: list  # pair index -> video index
    pair_seqs: list  # TokenSeq per pair
    pair_text: list  # normalized caption per pair
    vocab: Vocabulary
    n_v: int

    def __len__(self):
        return len(self.pair_video)

    @property
    def d_f(self) -> int:
        return self.features.shape[-1]

    def targets(self, idx) -> torch.Tensor:
        return torch.tensor([self.pair_seqs[i].ids for i in idx], dtype=torch.long)

    def conditions(self, idx) -> torch.Tensor:
        return self.features[[self.pair_video[i] for i in idx]]

    def batches(self, batch_size: int, rng: Optional[RngState] = None) -> Iterator[list]:
        """Index batches; shuffled when an rng is given."""
        order = rng.permutation(len(self)).tolist() if rng is not None else list(range(len(self)))
        for start in range(0, len(order), batch_size):
            yield order[start:start + batch_size]

    def references(self) -> dict:
        """video_id -> list of normalized reference captions."""
        refs: dict = {}
        for vi, text in zip(self.pair_video, self.pair_text):
            refs.setdefault(self.video_ids[vi], []).append(text)
        return refs

    def subset(self, pair_idx) -> "CaptionDataset":
        """Selected pairs, keeping only the videos they reference."""
        pair_idx = list(pair_idx)
        videos = sorted({self.pair_video[i] for i in pair_idx})
        remap = {old: new for new, old in enumerate(videos)}
        return CaptionDataset([self.video_ids[v] for v in videos], self.features[videos],
                              [remap[self.pair_video[i]] for i in pair_idx],
                              [self.pair_seqs[i] for i in pair_idx],
                              [self.pair_text[i] for i in pair_idx], self.vocab, self.n_v)


def load_dataset(features_dir, captions_path, vocab: Optional[Vocabulary] = None,
                 n_v: int = 20, min_freq: int = 1) -> CaptionDataset:
    """Pair every caption line with its video's features.

    Builds the vocabulary from the captions when none is given.
    """
    rows = read_captions(captions_path)
    if not rows:
        raise IngestionError(f"captions file {captions_path} has no captions")
    if vocab is None:
        vocab = build_vocab([r["caption"] for r in rows], min_freq)
    video_index: dict = {}
    mats = []
    shape = None
    pair_video, pair_seqs, pair_text = [], [], []
    for r in rows:
        vid = r["video_id"]
        if vid not in video_index:
            path = feature_path(features_dir, vid)
            if not path.is_file():
                raise IngestionError(f"missing feature file for video_id {vid!r} ({path})")
            _, mat = read_feature_file(path)
            if shape is None:
                shape = mat.shape
            elif mat.shape != shape:
                raise IngestionError(
                    f"feature shape {mat.shape} for {vid!r} differs from {shape}")
            video_index[vid] = len(mats)
            mats.append(mat)
        pair_video.append(video_index[vid])
        pair_seqs.append(encode_caption(r["caption"], vocab, n_v))
        pair_text.append(normalize(r["caption"]))
    features = torch.from_numpy(np.stack(mats))
    return CaptionDataset(list(video_index), features, pair_video, pair_seqs, pair_text, vocab, n_v)


def load_features_dir(features_dir) -> list[tuple[str, np.ndarray]]:
    """All feature files in a directory, sorted by file name."""
    paths = sorted(Path(features_dir).glob(f"*{FEATURE_SUFFIX}"))
    return [read_feature_file(p) for p in paths]


OBJECTS = ["dog", "cat", "man", "woman", "girl", "boy", "bird", "horse",
           "child", "chef", "player", "singer", "baby", "monkey", "robot", "teacher"]
ACTIONS = ["running", "jumping", "cooking", "singing", "dancing", "swimming", "walking",
           "playing", "eating", "sleeping", "talking", "driving", "reading", "painting",
           "laughing", "climbing"]
SCENES = ["park", "kitchen", "street", "field", "room", "pool", "forest", "beach",
          "garden", "stadium", "office", "classroom", "river", "mountain", "studio", "market"]
TEMPLATE_WORDS = ("a", "is", "in", "the")


def _pool(names, n, prefix):
    return [names[i] if i < len(names) else f"{prefix}{i}" for i in range(n)]


@dataclass(frozen=True)
class SyntheticSpec:
    """Ground-truth-known corpus.

    Template mode (``min_len is None``): captions "a <object> is <action> in the
    <scene>", features are the three concept codes stacked as rows.

    With ``paraphrase`` each template-mode video gets a second caption line,
    "in the <scene> a <object> is <action>", so the caption given the features
    has two modes.

    Length mode: caption length drawn uniformly from [min_len, max_len], word i
    drawn from the object/action/scene pool i % 3; feature row i is the word's
    concept code plus a slot code, rows past the caption carry an end code.
    """

    n_examples: int = 500
    n_objects: int = 8
    n_actions: int = 8
    n_scenes: int = 8
    d_f: int = 32
    noise_std: float = 0.0
    seed: int = 0
    min_len: Optional[int] = None
    max_len: Optional[int] = None
    paraphrase: bool = False

    @property
    def pools(self):
        return (_pool(OBJECTS, self.n_objects, "object"),
                _pool(ACTIONS, self.n_actions, "action"),
                _pool(SCENES, self.n_scenes, "scene"))

    @property
    def length_mode(self) -> bool:
        return self.min_len is not None


def concept_codes(spec: SyntheticSpec) -> dict:
    """Fixed random code per concept word (plus slot/end codes in length mode)."""
    rng = RngState(spec.seed, stream=7)
    codes = {}
    for pool in spec.pools:
        for word in pool:
            codes[word] = rng.normal((spec.d_f,)).numpy().astype(np.float32)
    if spec.length_mode:
        for i in range(spec.max_len):
            codes[f"<slot{i}>"] = rng.normal((spec.d_f,)).numpy().astype(np.float32)
        codes["<end>"] = rng.normal((spec.d_f,)).numpy().astype(np.float32)
    return codes


def synthesize(spec: SyntheticSpec) -> list[tuple[str, str, np.ndarray]]:
    """(video_id, caption, features) triples; a pure function of ``spec``."""
    if spec.length_mode and not 1 <= spec.min_len <= spec.max_len:
        raise IngestionError("need 1 <= min_len <= max_len")
    if spec.length_mode and spec.paraphrase:
        raise IngestionError("paraphrase captions exist only in template mode")
    codes = concept_codes(spec)
    objects, actions, scenes = spec.pools
    pools = spec.pools
    rng = RngState(spec.seed, stream=11)
    out = []
    for i in range(spec.n_examples):
        if spec.length_mode:
            length = int(rng.integers(spec.min_len, spec.max_len))
            words = [pools[j % 3][int(rng.integers(0, len(pools[j % 3]) - 1))]
                     for j in range(length)]
            rows = [codes[w] + codes[f"<slot{j}>"] for j, w in enumerate(words)]
            rows += [codes["<end>"] + codes[f"<slot{j}>"] for j in range(length, spec.max_len)]
            caption = " ".join(words)
        else:
            o = objects[int(rng.integers(0, len(objects) - 1))]
            a = actions[int(rng.integers(0, len(actions) - 1))]
            s = scenes[int(rng.integers(0, len(scenes) - 1))]
            rows = [codes[o], codes[a], codes[s]]
            caption = f"a {o} is {a} in the {s}"
        feats = np.stack(rows).astype(np.float32)
        if spec.noise_std > 0:
            feats = feats + spec.noise_std * rng.normal(feats.shape).numpy().astype(np.float32)
        out.append((f"vid{i:05d}", caption, feats))
        if spec.paraphrase:
            out.append((f"vid{i:05d}", f"in the {s} a {o} is {a}", feats))
    return out


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Write features/ and captions.jsonl under ``out_dir``; returns both paths."""
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for vid, caption, feats in synthesize(spec):
        if not rows or rows[-1]["video_id"] != vid:
            write_feature_file(feature_path(features_dir, vid), vid, feats)
        rows.append({"video_id": vid, "caption": caption})
    captions_path = out_dir / "captions.jsonl"
    write_captions(captions_path, rows)
    return features_dir, captions_path


def synthetic_vocab_size(spec: SyntheticSpec) -> int:
    n = spec.n_objects + spec.n_actions + spec.n_scenes + 4
    return n if spec.length_mode else n + len(TEMPLATE_WORDS)

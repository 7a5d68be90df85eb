"""Synthetic phoneme corpora and bit-exact feature/transcript file I/O.

A corpus is a set of utterances (frame-level feature matrices with optional
oracle boundaries/transcripts) plus an unpaired text corpus over the same
phoneme inventory. Speech transcriptions and text sentences are drawn from
disjoint sentence sets, so nothing downstream can cheat by pairing them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import binio

FEATURE_MAGIC = b"RBFT"
FEATURE_VERSION = 1

#: Sentinel marking a word boundary inside a raw (pre-silence) sentence.
WORD_BREAK = -1


class SynthesisError(RuntimeError):
    """Raised when a synthetic corpus config cannot be realized."""


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered token vocabulary with a designated silence token."""

    symbols: tuple[str, ...]
    sil_id: int

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("inventory symbols must be unique")
        if not 0 <= self.sil_id < len(self.symbols):
            raise ValueError("sil_id out of range")
        if len(self.symbols) < 3:
            raise ValueError("inventory needs silence plus at least two phonemes")

    @property
    def size(self) -> int:
        return len(self.symbols)

    def to_ids(self, tokens: list[str]) -> np.ndarray:
        index = {s: i for i, s in enumerate(self.symbols)}
        return np.array([index[t] for t in tokens], dtype=np.int64)

    def to_symbols(self, ids) -> list[str]:
        return [self.symbols[int(i)] for i in ids]


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, d) float32
    frame_rate_hz: float
    oracle_boundaries: np.ndarray | None = None  # (T,) uint8, first bit 1
    oracle_phonemes: np.ndarray | None = None  # one token id per oracle segment

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise ValueError(f"{self.id}: features must be a nonempty T x d matrix")
        if self.frame_rate_hz <= 0:
            raise ValueError(f"{self.id}: frame_rate_hz must be positive")
        if self.oracle_boundaries is not None:
            b = np.asarray(self.oracle_boundaries, dtype=np.uint8)
            if b.shape != (self.features.shape[0],):
                raise ValueError(f"{self.id}: boundary length != frame count")
            if b[0] != 1:
                raise ValueError(f"{self.id}: first boundary bit must be 1")
            self.oracle_boundaries = b
        if self.oracle_phonemes is not None:
            self.oracle_phonemes = np.asarray(self.oracle_phonemes, dtype=np.int64)
            if self.oracle_boundaries is not None:
                n_seg = int(self.oracle_boundaries.sum())
                if len(self.oracle_phonemes) != n_seg:
                    raise ValueError(f"{self.id}: {len(self.oracle_phonemes)} phonemes for {n_seg} segments")

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]

    def without_oracle(self) -> "Utterance":
        """View for training code paths: oracle fields stripped by construction."""
        return replace(self, oracle_boundaries=None, oracle_phonemes=None)


@dataclass
class TextCorpus:
    sentences: list[np.ndarray]  # token-id arrays, silence already inserted
    inventory: PhonemeInventory

    def __post_init__(self):
        for i, s in enumerate(self.sentences):
            s = np.asarray(s, dtype=np.int64)
            if len(s) == 0:
                raise ValueError(f"text sentence {i} is empty")
            if s.min() < 0 or s.max() >= self.inventory.size:
                raise ValueError(f"text sentence {i} has out-of-inventory tokens")
            self.sentences[i] = s


@dataclass(frozen=True)
class SynthConfig:
    n_phonemes: int = 12
    feature_dim: int = 32
    duration_range: tuple[int, int] = (2, 4)  # frames per phoneme, inclusive
    noise_std: float = 0.3
    prototype_separation: float = 2.0
    n_speech_utts: int = 500
    n_text_sents: int = 5000
    seed: int = 0
    frame_rate_hz: float = 50.0  # 20 ms frames: 20 ms tolerance == 1 frame
    n_valid_utts: int = 100
    sentence_len_range: tuple[int, int] = (6, 12)
    word_break_range: tuple[int, int] = (2, 5)
    sil_prob: float = 0.25

    def __post_init__(self):
        if self.n_phonemes < 2:
            raise ValueError("need at least two phonemes besides silence")
        if self.duration_range[0] < 1 or self.duration_range[0] > self.duration_range[1]:
            raise ValueError("bad duration_range")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if not 0 <= self.sil_prob <= 1:
            raise ValueError("sil_prob must be a probability")


def make_inventory(n_phonemes: int) -> PhonemeInventory:
    symbols = ("<sil>",) + tuple(f"p{i:02d}" for i in range(n_phonemes))
    return PhonemeInventory(symbols=symbols, sil_id=0)


def insert_silence(sentence, p: float, rng: np.random.Generator, sil_id: int) -> np.ndarray:
    """Bracket a sentence with silence and insert it at word breaks with prob p.

    `sentence` is a raw token sequence that may contain WORD_BREAK markers;
    the markers are consumed. Leading/trailing silence is unconditional.
    """
    if not 0 <= p <= 1:
        raise ValueError("p must be a probability")
    out = [sil_id]
    for tok in sentence:
        if tok == WORD_BREAK:
            if rng.random() < p:
                out.append(sil_id)
        else:
            out.append(int(tok))
    out.append(sil_id)
    return np.array(out, dtype=np.int64)


def _sample_prototypes(rng: np.random.Generator, config: SynthConfig) -> np.ndarray:
    """Points on a sphere of radius = separation, pairwise at least that far apart."""
    n = config.n_phonemes + 1
    radius = config.prototype_separation
    for _ in range(20):  # full restarts
        protos: list[np.ndarray] = []
        ok = True
        for _ in range(n):
            placed = False
            for _ in range(200):
                v = rng.standard_normal(config.feature_dim)
                norm = np.linalg.norm(v)
                if norm == 0:
                    continue
                v = v * (radius / norm)
                if all(np.linalg.norm(v - q) >= config.prototype_separation for q in protos):
                    protos.append(v)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return np.stack(protos).astype(np.float32)
    raise SynthesisError(
        f"cannot place {n} prototypes with separation {config.prototype_separation} "
        f"in {config.feature_dim} dimensions"
    )


def prototype_vectors(config: SynthConfig) -> np.ndarray:
    """The exact prototype matrix a generator run with this config uses."""
    return _sample_prototypes(np.random.default_rng(config.seed), config)


def _markov_chain(rng: np.random.Generator, n_phonemes: int) -> tuple[np.ndarray, np.ndarray]:
    """Fixed bigram chain over non-silence phonemes; no self-transitions."""
    init = rng.dirichlet(np.full(n_phonemes, 0.8))
    trans = rng.dirichlet(np.full(n_phonemes, 0.5), size=n_phonemes)
    np.fill_diagonal(trans, 0.0)
    trans /= trans.sum(axis=1, keepdims=True)
    return init, trans


def _sample_raw_sentence(rng, init, trans, config: SynthConfig) -> list[int]:
    lo, hi = config.sentence_len_range
    length = int(rng.integers(lo, hi + 1))
    tokens = [int(rng.choice(len(init), p=init))]
    for _ in range(length - 1):
        tokens.append(int(rng.choice(len(init), p=trans[tokens[-1]])))
    # interleave word breaks every 2-5 tokens; token ids shift by +1 for silence at 0
    blo, bhi = config.word_break_range
    out: list[int] = []
    next_break = int(rng.integers(blo, bhi + 1))
    for i, t in enumerate(tokens):
        if i == next_break:
            out.append(WORD_BREAK)
            next_break = i + int(rng.integers(blo, bhi + 1))
        out.append(t + 1)
    return out


def gen_synthetic_corpus(config: SynthConfig) -> tuple[list[Utterance], TextCorpus]:
    """Deterministically generate a speech corpus and a disjoint text corpus.

    Utterances come out in order: the first config.n_speech_utts are the
    training split, the remaining config.n_valid_utts the validation split.
    Features are prototype emissions plus Gaussian noise; oracle boundaries
    mark each token's first frame.
    """
    rng = np.random.default_rng(config.seed)
    inventory = make_inventory(config.n_phonemes)
    protos = _sample_prototypes(rng, config)
    init, trans = _markov_chain(rng, config.n_phonemes)

    n_speech = config.n_speech_utts + config.n_valid_utts
    need = n_speech + config.n_text_sents
    raws: list[list[int]] = []
    seen: set[tuple[int, ...]] = set()
    attempts = 0
    while len(raws) < need:
        attempts += 1
        if attempts > 60 * need:
            raise SynthesisError("cannot draw enough distinct sentences; enlarge the sentence space")
        raw = _sample_raw_sentence(rng, init, trans, config)
        key = tuple(t for t in raw if t != WORD_BREAK)
        if key in seen:
            continue
        seen.add(key)
        raws.append(raw)

    sil = inventory.sil_id
    utts: list[Utterance] = []
    dmin, dmax = config.duration_range
    for i in range(n_speech):
        sent = insert_silence(raws[i], config.sil_prob, rng, sil)
        durations = rng.integers(dmin, dmax + 1, size=len(sent))
        total = int(durations.sum())
        feats = np.repeat(protos[sent], durations, axis=0)
        if config.noise_std > 0:
            feats = feats + rng.standard_normal((total, config.feature_dim)).astype(np.float32) * np.float32(
                config.noise_std
            )
        bounds = np.zeros(total, dtype=np.uint8)
        bounds[np.concatenate(([0], np.cumsum(durations)[:-1]))] = 1
        utts.append(
            Utterance(
                id=f"utt{i:05d}",
                features=feats.astype(np.float32),
                frame_rate_hz=config.frame_rate_hz,
                oracle_boundaries=bounds,
                oracle_phonemes=sent,
            )
        )

    text_sents = [insert_silence(raws[n_speech + j], config.sil_prob, rng, sil) for j in range(config.n_text_sents)]
    return utts, TextCorpus(sentences=text_sents, inventory=inventory)


# ---------------------------------------------------------------------------
# feature files: magic RBFT, u32 version, u32 T, u32 d, f64 frame_rate, f32 body


def write_features(utt: Utterance, path) -> None:
    """Feature matrix + frame rate only; oracle fields travel in sidecars."""
    if not np.all(np.isfinite(utt.features)):
        raise ValueError(f"{utt.id}: non-finite feature values")
    t, d = utt.features.shape
    with open(path, "wb") as fh:
        binio.write_header(fh, FEATURE_MAGIC, FEATURE_VERSION)
        binio.pack_u32(fh, t, d)
        binio.pack_f64(fh, utt.frame_rate_hz)
        fh.write(np.ascontiguousarray(utt.features, dtype="<f4").tobytes())


def read_features(path, utt_id: str | None = None) -> Utterance:
    path = Path(path)
    with open(path, "rb") as fh:
        binio.read_header(fh, FEATURE_MAGIC, FEATURE_VERSION)
        t, d = binio.unpack_u32(fh, 2)
        (rate,) = binio.unpack_f64(fh, 1)
        body = binio.read_exact(fh, 4 * t * d)
    feats = np.frombuffer(body, dtype="<f4").reshape(t, d).copy()
    return Utterance(id=utt_id if utt_id is not None else path.stem, features=feats, frame_rate_hz=rate)


# ---------------------------------------------------------------------------
# line-oriented sidecars: one utterance per line


def write_token_lines(path, sequences, inventory: PhonemeInventory) -> None:
    with open(path, "w") as fh:
        for seq in sequences:
            fh.write(" ".join(inventory.to_symbols(seq)) + "\n")


def read_token_lines(path, inventory: PhonemeInventory) -> list[np.ndarray]:
    out = []
    with open(path) as fh:
        for line in fh:
            out.append(inventory.to_ids(line.split()))
    return out


def write_bit_lines(path, boundaries) -> None:
    with open(path, "w") as fh:
        for bits in boundaries:
            fh.write("".join("1" if b else "0" for b in bits) + "\n")


def read_bit_lines(path) -> list[np.ndarray]:
    out = []
    with open(path) as fh:
        for line in fh:
            out.append(np.frombuffer(line.strip().encode(), dtype=np.uint8) - ord("0"))
    return out


# ---------------------------------------------------------------------------
# corpus manifest: JSON mapping split -> utterance records


def save_corpus(splits: dict[str, list[Utterance]], text: TextCorpus, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    inv = text.inventory
    manifest: dict = {
        "version": 1,
        "inventory": {"symbols": list(inv.symbols), "sil_id": inv.sil_id},
        "text": "text.txt",
        "splits": {},
    }
    write_token_lines(out_dir / "text.txt", text.sentences, inv)
    for split, utts in splits.items():
        records = []
        for utt in utts:
            rec = {"id": utt.id, "features": f"features/{utt.id}.rbft"}
            write_features(utt, out_dir / rec["features"])
            if utt.oracle_phonemes is not None:
                rec["transcript"] = f"features/{utt.id}.phn"
                write_token_lines(out_dir / rec["transcript"], [utt.oracle_phonemes], inv)
            if utt.oracle_boundaries is not None:
                rec["boundaries"] = f"features/{utt.id}.bnd"
                write_bit_lines(out_dir / rec["boundaries"], [utt.oracle_boundaries])
            records.append(rec)
        manifest["splits"][split] = records
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_corpus(manifest_path) -> tuple[dict[str, list[Utterance]], TextCorpus]:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != 1:
        raise binio.BadVersionError(f"unsupported manifest version {manifest.get('version')}")
    inv = PhonemeInventory(symbols=tuple(manifest["inventory"]["symbols"]), sil_id=manifest["inventory"]["sil_id"])
    text = TextCorpus(sentences=read_token_lines(root / manifest["text"], inv), inventory=inv)
    splits: dict[str, list[Utterance]] = {}
    for split, records in manifest["splits"].items():
        utts = []
        for rec in records:
            utt = read_features(root / rec["features"], utt_id=rec["id"])
            phones = read_token_lines(root / rec["transcript"], inv)[0] if "transcript" in rec else None
            bounds = read_bit_lines(root / rec["boundaries"])[0] if "boundaries" in rec else None
            utts.append(replace(utt, oracle_phonemes=phones, oracle_boundaries=bounds))
        splits[split] = utts
    return splits, text

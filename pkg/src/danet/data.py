"""Synthetic sources, mixing at controlled SNR, membership labels and chunked
datasets on disk.

Two source kinds stand in for different talkers: a harmonic source (a
glottal-like pulse train of up to 10 harmonics following a slowly varying
pitch contour) and band-limited noise. Both are amplitude modulated at a
syllabic rate so sources take turns dominating the T-F plane.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import signal as sig
from .attractor import to_rows
from .tensorio import FormatError, load_tensors, save_tensors

SOURCE_RMS = 0.1
MAX_HARMONICS = 10
SPLITS = ("train", "valid", "test")
# Disjoint seed blocks per split: train/valid/test sources never share a seed.
_SPLIT_OFFSET = {"train": 0, "valid": 1_000_000, "test": 2_000_000}
_DATASET_STRIDE = 10_000_000
REGISTERS = {"low": (80.0, 150.0), "high": (170.0, 300.0)}


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class SourceSpec:
    kind: str  # "harmonic" | "noise"
    seed: int
    am_rate: float = 4.0
    f0_trajectory: tuple = ()
    band: tuple = ()

    def validate(self):
        if self.kind == "harmonic":
            if not self.f0_trajectory:
                raise DataError("harmonic source needs an f0 trajectory")
            if min(self.f0_trajectory) <= 60 or max(self.f0_trajectory) >= 400:
                raise DataError(f"f0 trajectory {self.f0_trajectory} outside (60, 400) Hz")
        elif self.kind == "noise":
            if len(self.band) != 2 or not 0 < self.band[0] < self.band[1] < 4000:
                raise DataError(f"noise band {self.band} must lie within (0, 4000) Hz")
        else:
            raise DataError(f"unknown source kind {self.kind!r}")
        if self.am_rate <= 0:
            raise DataError("modulation rate must be positive")


def random_source_spec(seed: int, kind: str, register: str = "low") -> SourceSpec:
    rng = np.random.default_rng(seed)
    am_rate = float(rng.uniform(2.5, 6.0))
    if kind == "harmonic":
        lo, hi = REGISTERS[register]
        f0 = tuple(float(f) for f in rng.uniform(lo, hi, size=5))
        return SourceSpec("harmonic", seed, am_rate, f0_trajectory=f0)
    low = float(rng.uniform(150.0, 1500.0))
    width = float(rng.uniform(800.0, 2000.0))
    return SourceSpec("noise", seed, am_rate, band=(low, min(low + width, 3800.0)))


def _envelope(rng, n, am_rate, sr):
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    # syllable-like bursts: rectified sine raised to a power, with a small floor
    burst = np.maximum(np.sin(2 * np.pi * am_rate * t + phase), 0.0) ** 1.5
    return 0.05 + burst


def synthesize_source(spec: SourceSpec, duration_s: float,
                      sample_rate: int = sig.SAMPLE_RATE) -> sig.Waveform:
    if duration_s <= 0:
        raise DataError("duration must be positive")
    spec.validate()
    n = int(round(duration_s * sample_rate))
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "harmonic":
        knots = np.linspace(0, n - 1, len(spec.f0_trajectory))
        f0 = np.interp(np.arange(n), knots, spec.f0_trajectory)
        phase = 2 * np.pi * np.cumsum(f0) / sample_rate
        x = np.zeros(n)
        nyq = 0.5 * sample_rate
        for h in range(1, MAX_HARMONICS + 1):
            if h * f0.max() >= nyq:
                break
            x += np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h
    else:
        noise = rng.standard_normal(n)
        spec_f = np.fft.rfft(noise)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec_f[(freqs < spec.band[0]) | (freqs > spec.band[1])] = 0.0
        x = np.fft.irfft(spec_f, n=n)
    x = x * _envelope(rng, n, spec.am_rate, sample_rate)
    x *= SOURCE_RMS / np.sqrt(np.mean(x * x))
    return sig.Waveform(x, sample_rate)


@dataclass
class MixtureRecord:
    id: str
    mixture: sig.Waveform
    sources: list
    snr_db: list
    split: str = ""


def _power(x):
    return float(np.mean(np.asarray(x) ** 2))


def mix(sources, snr_db, mix_id: str = "") -> MixtureRecord:
    """Scale sources so 10*log10(P_ref / P_i) = snr_db[i]; source 0 is the reference."""
    if len(sources) != len(snr_db):
        raise DataError("need one SNR value per source")
    if snr_db[0] != 0:
        raise DataError("snr_db[0] must be 0: the first source is the reference")
    lengths = {len(s) for s in sources}
    if len(lengths) != 1:
        raise DataError(f"sources must have equal lengths, got {sorted(lengths)}")
    powers = [_power(s.samples) for s in sources]
    if min(powers) == 0:
        raise DataError("cannot mix a silent source (zero power)")
    p_ref = powers[0]
    scaled = []
    for s, p, snr in zip(sources, powers, snr_db):
        gain = np.sqrt(p_ref / (p * 10.0 ** (snr / 10.0)))
        scaled.append(sig.Waveform(s.samples * gain, s.sample_rate))
    total = np.sum([s.samples for s in scaled], axis=0)
    return MixtureRecord(mix_id, sig.Waveform(total, sources[0].sample_rate),
                         scaled, list(map(float, snr_db)))


def membership(source_mags) -> np.ndarray:
    """One-hot argmax over sources for each bin, (T*F, C); ties go to the lowest index."""
    mags = np.asarray(source_mags)
    if mags.ndim == 3:
        mags = to_rows(mags)
    winner = np.argmax(mags, axis=-1)  # argmax returns the first maximum
    return np.eye(mags.shape[-1])[winner]


@dataclass
class ChunkSet:
    """Stacked chunks of equal length: arrays indexed by chunk first."""
    features: np.ndarray  # (N, F, L)
    mixture_mag: np.ndarray  # (N, F, L)
    source_mags: np.ndarray  # (N, F, L, C)
    membership: np.ndarray  # (N, L*F, C)
    mixture_phase: np.ndarray  # (N, F, L)
    chunk_len: int

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_sources(self) -> int:
        return self.source_mags.shape[-1]

    def subset(self, idx):
        return ChunkSet(self.features[idx], self.mixture_mag[idx], self.source_mags[idx],
                        self.membership[idx], self.mixture_phase[idx], self.chunk_len)


def chunk_record(rec: MixtureRecord, stats, chunk_len: int) -> ChunkSet | None:
    """Non-overlapping chunks of ``chunk_len`` frames; the trailing partial chunk is dropped."""
    X = sig.stft(rec.mixture)
    feats = sig.log_magnitude_features(X, stats).values
    S = np.stack([np.abs(sig.stft(s).bins) for s in rec.sources], axis=-1)
    n_chunks = X.n_frames // chunk_len
    if n_chunks == 0:
        return None
    F = X.n_freq
    sl = [slice(i * chunk_len, (i + 1) * chunk_len) for i in range(n_chunks)]
    src = np.stack([S[:, s] for s in sl])
    return ChunkSet(
        features=np.stack([feats[:, s] for s in sl]),
        mixture_mag=np.stack([np.abs(X.bins[:, s]) for s in sl]),
        source_mags=src,
        membership=np.stack([membership(c) for c in src]).reshape(n_chunks, chunk_len * F, -1),
        mixture_phase=np.stack([np.angle(X.bins[:, s]) for s in sl]),
        chunk_len=chunk_len,
    )


def concat_chunks(parts) -> ChunkSet:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise DataError("no chunks: every mixture is shorter than one chunk")
    return ChunkSet(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                      ("features", "mixture_mag", "source_mags", "membership",
                       "mixture_phase")), chunk_len=parts[0].chunk_len)


def _source_plan(C, rng):
    """Kinds/registers for one mixture: every source differs in kind or register."""
    if C == 2:
        return [("harmonic", str(rng.choice(list(REGISTERS)))), ("noise", "")]
    if C == 3:
        return [("harmonic", "low"), ("harmonic", "high"), ("noise", "")]
    raise DataError(f"only 2 or 3 sources supported, got {C}")


def generate_mixture(seed: int, split: str, index: int, C: int, snr_range,
                     duration_s: float) -> tuple[MixtureRecord, list]:
    base = seed * _DATASET_STRIDE + _SPLIT_OFFSET[split] + index * C
    rng = np.random.default_rng([seed, _SPLIT_OFFSET[split], index])
    plan = _source_plan(C, rng)
    specs = [random_source_spec(base + c, kind, reg) for c, (kind, reg) in enumerate(plan)]
    order = rng.permutation(C)
    specs = [specs[i] for i in order]
    sources = [synthesize_source(s, duration_s) for s in specs]
    snr = [0.0] + [float(rng.uniform(*snr_range)) for _ in range(C - 1)]
    rec = mix(sources, snr, f"{split}-{index:05d}")
    rec.split = split
    peak = np.max(np.abs(rec.mixture.samples))
    if peak > 0.95:
        # keep the SNRs, just avoid 16-bit clipping
        g = 0.95 / peak
        rec.mixture = sig.Waveform(rec.mixture.samples * g)
        rec.sources = [sig.Waveform(s.samples * g) for s in rec.sources]
    return rec, specs


def _write_record(out: Path, rec: MixtureRecord, specs, C):
    wav_dir = out / "wav" / rec.split
    wav_dir.mkdir(parents=True, exist_ok=True)
    mix_path = wav_dir / f"{rec.id}_mix.wav"
    sig.write_wav(mix_path, rec.mixture)
    src_paths = []
    for c, s in enumerate(rec.sources):
        p = wav_dir / f"{rec.id}_s{c}.wav"
        sig.write_wav(p, s)
        src_paths.append(str(p.relative_to(out)))
    return {"id": rec.id, "split": rec.split, "C": C, "snr_db": rec.snr_db,
            "mixture": str(mix_path.relative_to(out)), "sources": src_paths,
            "source_seeds": [s.seed for s in specs],
            "source_specs": [asdict(s) for s in specs]}


def make_dataset(out_dir, n_mixtures: int, C: int = 2, chunk_len: int = 100, seed: int = 0,
                 snr_range=(0.0, 10.0), n_valid: int | None = None, n_test: int | None = None,
                 duration_s: float = 4.0, write_chunks: bool = True) -> list:
    """Write WAVs, a JSON-lines manifest, training normalization stats and
    per-split chunk stores under ``out_dir``. Returns the manifest entries.

    ``n_mixtures`` counts training mixtures; validation and test default to a
    fifth of that (at least one each).
    """
    if n_mixtures < 1:
        raise DataError("n_mixtures must be at least 1")
    if chunk_len < 10:
        raise DataError("chunk_len must be at least 10 frames")
    counts = {"train": n_mixtures,
              "valid": n_valid if n_valid is not None else max(1, n_mixtures // 5),
              "test": n_test if n_test is not None else max(1, n_mixtures // 5)}
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create dataset directory {out}: {exc}") from exc
    manifest = []
    records = {s: [] for s in SPLITS}
    for split in SPLITS:
        for i in range(counts[split]):
            rec, specs = generate_mixture(seed, split, i, C, snr_range, duration_s)
            try:
                manifest.append(_write_record(out, rec, specs, C))
            except OSError as exc:
                raise DataError(f"failed writing {rec.id} under {out}: {exc}") from exc
            records[split].append(rec)
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for entry in manifest:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    # Statistics and chunks are computed from the quantized files, like any consumer would.
    loaded = {s: load_split(out, s) for s in SPLITS}
    stats = sig.accumulate_norm_stats(sig.stft(r.mixture) for r in loaded["train"])
    save_tensors(out / "norm_stats.bin", {"norm.mean": stats[0], "norm.std": stats[1]},
                 {"kind": "norm_stats"})
    info = {"C": C, "chunk_len": chunk_len, "seed": seed, "snr_range": list(snr_range),
            "duration_s": duration_s, "counts": counts}
    (out / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    if write_chunks:
        for split in SPLITS:
            cs = concat_chunks(chunk_record(r, stats, chunk_len) for r in loaded[split])
            save_chunk_store(out / f"chunks_{split}.bin", cs)
    return manifest


def read_manifest(dataset_dir) -> list:
    path = Path(dataset_dir) / "manifest.jsonl"
    if not path.exists():
        raise DataError(f"no manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_split(dataset_dir, split: str) -> list:
    root = Path(dataset_dir)
    recs = []
    for e in read_manifest(root):
        if e["split"] != split:
            continue
        recs.append(MixtureRecord(
            e["id"], sig.read_wav(root / e["mixture"]),
            [sig.read_wav(root / p) for p in e["sources"]], e["snr_db"], split))
    return recs


def load_norm_stats(dataset_dir):
    tensors, _ = load_tensors(Path(dataset_dir) / "norm_stats.bin")
    return tensors["norm.mean"].astype(np.float64), tensors["norm.std"].astype(np.float64)


_CHUNK_FIELDS = ("features", "mixture_mag", "source_mags", "membership", "mixture_phase")


def save_chunk_store(path, cs: ChunkSet):
    tensors = {}
    for i in range(len(cs)):
        for f in _CHUNK_FIELDS:
            tensors[f"chunk{i:06d}.{f}"] = getattr(cs, f)[i]
    save_tensors(path, tensors, {"kind": "chunks", "chunk_len": cs.chunk_len,
                                 "n_chunks": len(cs)})


def load_chunk_store(path) -> ChunkSet:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "chunks":
        raise FormatError(f"{path}: DANET1 file is not a chunk store")
    n = meta["n_chunks"]
    fields = {f: np.stack([tensors[f"chunk{i:06d}.{f}"] for i in range(n)])
              for f in _CHUNK_FIELDS}
    return ChunkSet(**fields, chunk_len=meta["chunk_len"])


def load_chunks(dataset_dir, split: str, chunk_len: int, stats=None) -> ChunkSet:
    """Chunks for ``split``: from the store when its chunk length matches, else
    re-chunked from the WAV files (e.g. for 400-frame curriculum training)."""
    root = Path(dataset_dir)
    store = root / f"chunks_{split}.bin"
    if stats is None and store.exists():
        cs = load_chunk_store(store)
        if cs.chunk_len == chunk_len:
            return cs
    if stats is None:
        stats = load_norm_stats(root)
    return concat_chunks(chunk_record(r, stats, chunk_len) for r in load_split(root, split))

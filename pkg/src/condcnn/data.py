"""Sensor data pipeline: ingestion, resampling, sliding-window segmentation,
normalization, and train/test splitting.

Raw datasets arrive in heterogeneous formats, so everything downstream
consumes one canonical CSV layout:

    # rate_hz=<float>
    subject,session,label,<ch1>,<ch2>,...
    s1,a,Walking,0.12,-9.81,0.4
    ...

UTF-8, LF line endings, '.' decimal separator. Labels may be class names
(mapped to ids by sorted order) or non-negative integers (used directly).
Pre-windowed corpora are expressed as one session per window with exactly
window_len samples and step == window_len.
"""

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from . import storage
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass
class SensorStream:
    """Multichannel samples with per-sample labels and provenance tags."""

    data: np.ndarray          # (L, C) float64
    channel_names: list
    sample_rate_hz: float
    labels: np.ndarray        # (L,) int
    label_names: list
    subject: np.ndarray       # (L,) str
    session: np.ndarray       # (L,) str

    def __post_init__(self):
        L = self.data.shape[0]
        if not (len(self.labels) == len(self.subject) == len(self.session) == L):
            raise DataError("stream columns disagree on sample count")
        if self.sample_rate_hz <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self):
        return self.data.shape[0]

    def session_runs(self):
        """Yield (start, end) index pairs of contiguous (subject, session) runs."""
        L = len(self)
        if L == 0:
            return
        start = 0
        for i in range(1, L):
            if self.subject[i] != self.subject[start] or self.session[i] != self.session[start]:
                yield start, i
                start = i
        yield start, L


@dataclass
class WindowedDataset:
    """Fixed-length windows ready for model consumption."""

    x: np.ndarray             # (N, T, C) float64
    y: np.ndarray             # (N,) int
    window_len: int
    step: int
    label_names: list
    subject: np.ndarray       # (N,) str
    session: np.ndarray       # (N,) str
    normalization_stats: tuple | None = None   # (mean[C], std[C])
    split_tag: str = ""

    def __len__(self):
        return self.x.shape[0]

    @property
    def n_channels(self):
        return self.x.shape[2]

    def subset(self, indices, split_tag=None):
        return replace(
            self,
            x=self.x[indices],
            y=self.y[indices],
            subject=self.subject[indices],
            session=self.session[indices],
            split_tag=self.split_tag if split_tag is None else split_tag,
        )

    def save(self, path):
        arrays = {"x": self.x, "y": self.y.astype(np.int64)}
        meta = {
            "window_len": int(self.window_len),
            "step": int(self.step),
            "label_names": list(self.label_names),
            "subject": [str(s) for s in self.subject],
            "session": [str(s) for s in self.session],
            "normalization_stats": None if self.normalization_stats is None else [
                list(map(float, self.normalization_stats[0])),
                list(map(float, self.normalization_stats[1])),
            ],
            "split_tag": self.split_tag,
        }
        storage.save_container(path, arrays, meta)

    @classmethod
    def load(cls, path):
        arrays, meta = storage.load_container(path)
        stats = meta.get("normalization_stats")
        return cls(
            x=arrays["x"],
            y=arrays["y"],
            window_len=meta["window_len"],
            step=meta["step"],
            label_names=meta["label_names"],
            subject=np.array(meta["subject"], dtype=object),
            session=np.array(meta["session"], dtype=object),
            normalization_stats=None if stats is None else (
                np.array(stats[0]), np.array(stats[1])
            ),
            split_tag=meta.get("split_tag", ""),
        )


@dataclass
class DatasetProfile:
    """Per-dataset recipe: windowing, rates, normalization, split strategy."""

    name: str
    window_len: int
    step: int
    classes: int
    resample_to_hz: float | None = None
    normalization: str = "none"          # "none" | "zscore"
    split: dict | None = None            # {"kind": "random", "train_fraction": 0.7}
                                         # or {"kind": "sessions", "train": [[subj, sess]...],
                                         #     "test": [[subj, sess]...]}
    test_step: int | None = None         # session splits may widen the test stride

    def __post_init__(self):
        if self.window_len < 1 or self.step < 1:
            raise ConfigError("window_len and step must be positive")
        if self.normalization not in ("none", "zscore"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.test_step is not None:
            kind = (self.split or {}).get("kind")
            if kind != "sessions":
                raise ConfigError(
                    "test_step is only valid with a session split; under a "
                    "random split it would let train and test windows overlap"
                )

    @property
    def overlap_percent(self):
        return 100.0 * (1.0 - self.step / self.window_len)

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in (
            "name", "window_len", "step", "classes", "resample_to_hz",
            "normalization", "split", "test_step",
        ) if k in d}
        return cls(**known)


def window_count(length, window_len, step):
    """Windows obtainable from a run of `length` samples."""
    if length < window_len:
        return 0
    return (length - window_len) // step + 1


# -- canonical CSV --------------------------------------------------------------

def write_canonical(path, stream):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# rate_hz={stream.sample_rate_hz}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject", "session", "label"] + list(stream.channel_names))
        for i in range(len(stream)):
            writer.writerow(
                [stream.subject[i], stream.session[i], stream.label_names[stream.labels[i]]]
                + [repr(float(v)) for v in stream.data[i]]
            )


def ingest_canonical(path, nan_policy="drop-row"):
    """Load a canonical CSV into a SensorStream.

    Rows whose channel cells are NaN are dropped (and counted) under the
    default policy; `nan_policy="error"` raises instead. Ragged rows and
    non-numeric cells always raise, with the offending line number.
    """
    if nan_policy not in ("drop-row", "error"):
        raise ConfigError(f"unknown nan policy {nan_policy!r}")
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if not first.startswith("# rate_hz="):
            raise DataError(f"{path}: line 1 must be '# rate_hz=<float>', got {first!r}")
        try:
            rate = float(first.split("=", 1)[1])
        except ValueError:
            raise DataError(f"{path}: line 1 has a non-numeric rate") from None
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header row") from None
        if header[:3] != ["subject", "session", "label"] or len(header) < 4:
            raise DataError(
                f"{path}: line 2 must start 'subject,session,label' and "
                f"name at least one channel"
            )
        channel_names = header[3:]
        n_cols = len(header)

        subjects, sessions, raw_labels, rows = [], [], [], []
        dropped = 0
        for line_no, row in enumerate(reader, start=3):
            if not row:
                continue
            if len(row) != n_cols:
                raise DataError(
                    f"{path}: line {line_no}: expected {n_cols} columns, got {len(row)}"
                )
            try:
                values = [float(cell) for cell in row[3:]]
            except ValueError:
                raise DataError(
                    f"{path}: line {line_no}: non-numeric channel value"
                ) from None
            if any(np.isnan(v) for v in values):
                if nan_policy == "error":
                    raise DataError(f"{path}: line {line_no}: NaN channel value")
                dropped += 1
                continue
            subjects.append(row[0])
            sessions.append(row[1])
            raw_labels.append(row[2])
            rows.append(values)
    if dropped:
        log.warning("%s: dropped %d rows with NaN cells", path, dropped)

    labels, label_names = _encode_labels(raw_labels)
    return SensorStream(
        data=np.array(rows, dtype=np.float64).reshape(len(rows), len(channel_names)),
        channel_names=channel_names,
        sample_rate_hz=rate,
        labels=labels,
        label_names=label_names,
        subject=np.array(subjects, dtype=object),
        session=np.array(sessions, dtype=object),
    )


def _encode_labels(raw):
    if all(r.isdigit() for r in raw) and raw:
        ids = np.array([int(r) for r in raw], dtype=np.int64)
        names = [str(i) for i in range(int(ids.max()) + 1)]
        return ids, names
    names = sorted(set(raw))
    index = {name: i for i, name in enumerate(names)}
    return np.array([index[r] for r in raw], dtype=np.int64), names


# -- WISDM raw-format converter ----------------------------------------------------

WISDM_RATE_HZ = 20.0


@dataclass
class ConversionReport:
    records_seen: int
    records_written: int
    records_skipped: int
    class_counts: dict

    def summary(self):
        parts = [
            f"records seen: {self.records_seen}",
            f"written: {self.records_written}",
            f"skipped: {self.records_skipped}",
        ]
        for name in sorted(self.class_counts):
            parts.append(f"{name}: {self.class_counts[name]}")
        return "; ".join(parts)


def convert_wisdm(raw_path, out_path):
    """Convert raw WISDM text (user,activity,timestamp,x,y,z; records
    terminated by ';') into a canonical CSV at 20 Hz.

    Malformed records are skipped and counted, never fatal.
    """
    with open(raw_path, "r", encoding="utf-8", errors="replace") as fh:
        text = fh.read()

    subjects, labels, rows = [], [], []
    seen = skipped = 0
    for record in text.split(";"):
        record = record.strip().strip(",")
        if not record:
            continue
        seen += 1
        fields = [f.strip() for f in record.split(",")]
        if len(fields) != 6:
            skipped += 1
            continue
        user, activity, _timestamp, xs, ys, zs = fields
        if not user or not activity:
            skipped += 1
            continue
        try:
            values = [float(xs), float(ys), float(zs)]
        except ValueError:
            skipped += 1
            continue
        if any(np.isnan(v) for v in values):
            skipped += 1
            continue
        subjects.append(user)
        labels.append(activity)
        rows.append(values)

    label_ids, label_names = _encode_labels(labels)
    stream = SensorStream(
        data=np.array(rows, dtype=np.float64).reshape(len(rows), 3),
        channel_names=["x_accel", "y_accel", "z_accel"],
        sample_rate_hz=WISDM_RATE_HZ,
        labels=label_ids,
        label_names=label_names,
        subject=np.array(subjects, dtype=object),
        session=np.array(subjects, dtype=object),  # WISDM has no session notion
    )
    write_canonical(out_path, stream)
    counts = {}
    for lab in labels:
        counts[lab] = counts.get(lab, 0) + 1
    report = ConversionReport(seen, len(rows), skipped, counts)
    log.info("wisdm conversion: %s", report.summary())
    return report


# -- transforms -----------------------------------------------------------------

def resample(stream, to_hz):
    """Decimate to approximately `to_hz` by keeping every round(from/to)-th
    sample; labels and provenance are decimated identically."""
    if to_hz <= 0:
        raise ConfigError(f"target rate must be positive, got {to_hz}")
    if to_hz > stream.sample_rate_hz:
        raise ConfigError(
            f"cannot resample upward: {stream.sample_rate_hz} -> {to_hz} Hz"
        )
    factor = int(round(stream.sample_rate_hz / to_hz))
    if factor == 1:
        return stream
    return SensorStream(
        data=stream.data[::factor].copy(),
        channel_names=stream.channel_names,
        sample_rate_hz=stream.sample_rate_hz / factor,
        labels=stream.labels[::factor].copy(),
        label_names=stream.label_names,
        subject=stream.subject[::factor].copy(),
        session=stream.session[::factor].copy(),
    )


def segment_windows(stream, profile, step=None):
    """Slide a window of profile.window_len over every (subject, session)
    run; windows never span a run boundary.

    Each window takes the majority label of its samples (ties resolve to
    the smaller class id). `step` overrides profile.step when given.
    """
    t_w = profile.window_len
    step = profile.step if step is None else step
    if t_w > len(stream):
        log.warning("window length %d exceeds stream length %d", t_w, len(stream))

    n_classes = max(profile.classes, int(stream.labels.max()) + 1 if len(stream) else 1)
    xs, ys, subjects, sessions = [], [], [], []
    for start, end in stream.session_runs():
        run_len = end - start
        for w in range(window_count(run_len, t_w, step)):
            a = start + w * step
            window_labels = stream.labels[a:a + t_w]
            xs.append(stream.data[a:a + t_w])
            ys.append(int(np.bincount(window_labels, minlength=n_classes).argmax()))
            subjects.append(stream.subject[a])
            sessions.append(stream.session[a])
    n = len(xs)
    if n == 0:
        log.warning("segmentation produced an empty dataset")
    return WindowedDataset(
        x=np.array(xs, dtype=np.float64).reshape(n, t_w, stream.data.shape[1]),
        y=np.array(ys, dtype=np.int64),
        window_len=t_w,
        step=step,
        label_names=stream.label_names,
        subject=np.array(subjects, dtype=object),
        session=np.array(sessions, dtype=object),
    )


def normalize(ds, policy, stats=None):
    """Per-channel z-scoring. Without `stats`, statistics come from `ds`
    itself (call this on the train split); pass the returned stats to
    transform the test split so nothing leaks."""
    if policy == "none":
        return ds, None
    if policy != "zscore":
        raise ConfigError(f"unknown normalization policy {policy!r}")
    if len(ds) == 0 and stats is None:
        return ds, None
    if stats is None:
        flat = ds.x.reshape(-1, ds.x.shape[2])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        if (std < 1e-12).any():
            log.warning(
                "zero-variance channels %s; guarded to unit scale",
                np.nonzero(std < 1e-12)[0].tolist(),
            )
        std = np.where(std < 1e-12, 1.0, std)
        stats = (mean, std)
    mean, std = stats
    out = replace(ds, x=(ds.x - mean) / std, normalization_stats=(mean, std))
    return out, stats


def split(ds, profile, seed=0):
    """Partition windows into train/test per the profile's strategy."""
    kind = (profile.split or {"kind": "random", "train_fraction": 0.7})["kind"]
    if kind == "random":
        frac = profile.split.get("train_fraction", 0.7) if profile.split else 0.7
        train_idx, test_idx = _stratified_indices(ds.y, frac, seed)
    elif kind == "sessions":
        train_pairs = {tuple(p) for p in profile.split["train"]}
        test_pairs = {tuple(p) for p in profile.split["test"]}
        tags = [(str(s), str(e)) for s, e in zip(ds.subject, ds.session)]
        train_idx = np.array([i for i, t in enumerate(tags) if t in train_pairs], dtype=int)
        test_idx = np.array([i for i, t in enumerate(tags) if t in test_pairs], dtype=int)
        unused = len(ds) - len(train_idx) - len(test_idx)
        if unused:
            log.warning("%d windows belong to neither split and were dropped", unused)
    else:
        raise ConfigError(f"unknown split kind {kind!r}")

    train = ds.subset(train_idx, split_tag="train")
    test = ds.subset(test_idx, split_tag="test")
    for tag, part in (("train", train), ("test", test)):
        present = set(np.unique(part.y).tolist())
        missing = [c for c in range(profile.classes) if c not in present]
        if missing:
            log.warning("%s split has no examples of classes %s", tag, missing)
    return train, test


def _stratified_indices(y, train_fraction, seed):
    """Seed-deterministic stratified split; per-class counts are
    apportioned by largest remainder so totals hit round(frac * N)."""
    rng = np.random.default_rng([seed, 0x5711])
    n = len(y)
    target = int(round(train_fraction * n))
    classes = np.unique(y)
    base, remainders = {}, []
    for c in classes:
        exact = train_fraction * int((y == c).sum())
        base[c] = int(np.floor(exact))
        remainders.append((-(exact - base[c]), int(c)))
    leftover = target - sum(base.values())
    for _, c in sorted(remainders):
        if leftover <= 0:
            break
        if base[c] < int((y == c).sum()):
            base[c] += 1
            leftover -= 1

    train_parts, test_parts = [], []
    for c in classes:
        idx = np.nonzero(y == c)[0]
        perm = rng.permutation(len(idx))
        take = base[int(c)]
        train_parts.append(idx[perm[:take]])
        test_parts.append(idx[perm[take:]])
    train_idx = np.sort(np.concatenate(train_parts))
    test_idx = np.sort(np.concatenate(test_parts))
    return train_idx, test_idx

"""Synthetic dataset builders shared by trainer, CLI, and acceptance tests."""

import numpy as np

from condcnn.data import DatasetProfile, SensorStream, WindowedDataset, split


def _dataset_from_arrays(x, y, window_len, label_names=None):
    n = len(y)
    return WindowedDataset(
        x=np.asarray(x, dtype=np.float64),
        y=np.asarray(y, dtype=np.int64),
        window_len=window_len,
        step=window_len,
        label_names=label_names or [str(i) for i in range(int(np.max(y)) + 1)],
        subject=np.array(["synth"] * n, dtype=object),
        session=np.array(["synth"] * n, dtype=object),
    )


def make_linear_dataset(n_per_class=40, t=16, channels=2, seed=0):
    """Two classes separated by a large per-channel mean shift."""
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for label in (0, 1):
        shift = -1.0 if label == 0 else 1.0
        for _ in range(n_per_class):
            xs.append(shift + 0.25 * rng.normal(size=(t, channels)))
            ys.append(label)
    order = rng.permutation(len(ys))
    return _dataset_from_arrays(np.array(xs)[order], np.array(ys)[order], t)


def _motif_bank(length):
    """Four distinct waveform shapes of a given length."""
    u = np.linspace(0.0, 1.0, length)
    return np.stack([
        np.sin(2 * np.pi * u),                     # one sine period
        np.sign(np.sin(2 * np.pi * u)) * 0.8,      # square wave
        2.0 * u - 1.0,                             # rising ramp
        np.exp(-0.5 * ((u - 0.5) / 0.15) ** 2),    # centered bump
    ])


def make_motif_dataset(n_per_class=150, t=32, seed=0, noise=0.4,
                       amplitude=1.5, context_bias=1.0):
    """Four classes, each a mixture of two temporal modes.

    An example carries one waveform (out of four) on its last channel plus
    a context offset on the first two channels. The waveform-to-class
    mapping is permuted between the two contexts, so the temporal shape
    alone never identifies the class: context 0 assigns waveform k to
    class k, context 1 assigns waveform (k+1) mod 4 to class k. Each class
    therefore owns two distinct motif modes, and a single kernel set has
    to split its capacity across both interpretation tables, while
    context-conditioned kernels can specialize.
    """
    rng = np.random.default_rng(seed)
    channels = 3
    motif_len = t // 2
    bank = _motif_bank(motif_len)
    biases = np.array([[context_bias, -context_bias, 0.0],
                       [-context_bias, context_bias, 0.0]])
    xs, ys = [], []
    for label in range(4):
        for _ in range(n_per_class):
            context = int(rng.integers(0, 2))
            waveform = label if context == 0 else (label + 1) % 4
            x = noise * rng.normal(size=(t, channels))
            x += biases[context]
            offset = int(rng.integers(0, t - motif_len + 1))
            x[offset:offset + motif_len, 2] += amplitude * bank[waveform]
            xs.append(x)
            ys.append(label)
    order = rng.permutation(len(ys))
    return _dataset_from_arrays(np.array(xs)[order], np.array(ys)[order], t)


def split_70_30(ds, classes, seed=0):
    prof = DatasetProfile(
        name="synth", window_len=ds.window_len, step=ds.step, classes=classes,
        split={"kind": "random", "train_fraction": 0.7},
    )
    return split(ds, prof, seed=seed)


def stream_from_dataset(ds, rate=20.0):
    """Flatten a windowed dataset back into one labeled stream (windows
    become contiguous runs; labels repeat per sample)."""
    n, t, c = ds.x.shape
    return SensorStream(
        data=ds.x.reshape(n * t, c),
        channel_names=[f"ch{i}" for i in range(c)],
        sample_rate_hz=rate,
        labels=np.repeat(ds.y, t),
        label_names=ds.label_names,
        subject=np.repeat(ds.subject, t),
        session=np.repeat([f"w{i}" for i in range(n)], t),
    )

"""Convert the published SHD/SSC HDF5 files to SPKE containers.

Usage::

    python scripts/shd_to_spke.py shd_train.h5 data/shd_train.spk
    python scripts/shd_to_spke.py shd_test.h5 data/shd_test.spk

The HDF5 files hold ``spikes/times`` (seconds) and ``spikes/units`` as
ragged arrays plus ``labels``. Requires ``h5py`` (``pip install .[convert]``).
"""

import argparse
import sys

import h5py
import numpy as np

from gpn.datasets import SpikeEventSequence, save_events


def convert(src, dst, channels=700):
    with h5py.File(src, "r") as fh:
        times = fh["spikes"]["times"]
        units = fh["spikes"]["units"]
        labels = np.asarray(fh["labels"])
        seqs = []
        for k in range(len(labels)):
            t = np.asarray(times[k], dtype=np.float64)
            u = np.asarray(units[k], dtype=np.int64)
            order = np.argsort(t, kind="stable")
            seqs.append(SpikeEventSequence(t[order], u[order], int(labels[k]), channels))
    save_events(dst, seqs, channels)
    return len(seqs)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("src")
    parser.add_argument("dst")
    parser.add_argument("--channels", type=int, default=700)
    args = parser.parse_args(argv)
    n = convert(args.src, args.dst, args.channels)
    print(f"wrote {n} sequences to {args.dst}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
One memory cell: write, store, read
===================================

A single memcapacitive cell sits at the end of a 1 mm bit line.  We sweep
the write amplitude to find the threshold, write a 1, let it decay, and
then read it back with the destructive READ + REFRESH sequence.

    python demos/cell_write_read.py
"""
import numpy as np

from dcram.device import storage_decay
from dcram.memops import CellSetup, extract_write_threshold, read_refresh, write_bit

setup = CellSetup()
dev = setup.device
print(f"C0 = {dev.C0 * 1e15:.2f} fF, C2 = {dev.C2 * 1e15:.2f} fF")

# Below a threshold amplitude almost no charge crosses the middle layer.
thr = extract_write_threshold(setup, amplitudes=np.linspace(0.0, 1.5, 16))
for a, v in zip(thr.amplitudes, thr.ivd_settled):
    print(f"  write amplitude {a:4.1f} V -> IVD after 1 s {v:+.3f} V")
print(f"write threshold V_t = {thr.V_t:.3f} V")

# A standard 1 V, 1 ns write stores a strong 1.
w = write_bit(0.0, 1, setup)
print(f"written IVD {w.ivd:.3f} V, cell energy {w.energy:.2f} fJ")

# In storage the internal charge leaks by tunnelling.
decay = storage_decay(w.ivd, dev, t_end=10.0, n_samples=5)
for t, v in zip(decay.t, decay.ivd):
    print(f"  t = {t:9.3g} s  IVD = {v:.3f} V")

# Reading drives every cell towards 1; the sense amplifier restores a 0.
for stored in (decay.ivd[-1], -decay.ivd[-1]):
    r = read_refresh(stored, setup, keep_waveforms=False)
    print(f"stored {stored:+.3f} V -> bit {r.bit}, after refresh {r.ivd:+.3f} V, "
          f"sense amplifier fired: {r.activated}, energy {r.energy:.2f} fJ")

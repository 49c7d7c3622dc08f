"""Simulation of memcapacitive dynamic computing memory (DCRAM).

Modules
-------
device    tunnelling physics of one three-layer memcapacitive cell
circuit   netlists with RC bit lines, transient solver, sense amplifier
memops    WRITE, READ + REFRESH, write threshold, retention
logic     coupled-cell gates, operation maps, schedule execution
compiler  boolean function compilation, level census, speedup estimate
cli       command-line front end
"""

__version__ = "0.1.0"

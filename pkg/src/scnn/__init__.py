"""Side-channel laboratory for MLP inference.

An instrumented forward-pass engine emits synthetic power/EM-style
traces under a Hamming-weight and data-dependent-timing leakage model;
the attack subpackage recovers activation functions, weights, layer
structure, and secret inputs from those traces; countermeasures degrade
the attacks for comparison.
"""

__version__ = "0.1.0"

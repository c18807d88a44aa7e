"""Clean-label full-target backdoor toolkit.

Wavelet perturbation, class-conditional trigger generators (FSBA and FMBA
paradigms), clean-label poisoning, attack/defense evaluation and an NTK
feature-strength oracle.
"""

__version__ = "0.1.0"

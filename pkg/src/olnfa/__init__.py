"""Object-level a contrario objectness for tiny-target detection.

Submodules
----------
nfa          exact binomial-tail NFA and the Hoeffding significance bound
autodiff     reverse-mode tensor engine and op registry
roi_align    bilinear ROI pooling with its adjoint
significance differentiable significance layer and objectness scores
detector     two-level grid detector with baseline and ol-nfa heads
synth        synthetic scenes and dataset IO
metrics      matching, P/R/F1 and AP
fewshot      few-shot experiment runner
"""
from ._backend import BACKEND
from .nfa import NfaContext, f_act, nfa_exact, significance_hoeffding

__version__ = "0.1.0"

__all__ = ["BACKEND", "NfaContext", "f_act", "nfa_exact", "significance_hoeffding", "__version__"]

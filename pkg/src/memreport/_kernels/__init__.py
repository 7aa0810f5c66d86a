"""Kernel backend selection.

Two implementations exist with identical semantics: npkernels (numpy
reference) and cykernels (compiled).  The default is a measured mix, taking
each kernel from whichever side wins at model shapes on a typical desktop
CPU (see benchmarks/bench_kernels.py for the numbers and how to re-measure):
compiled single-pass loops win for the arithmetic-bound kernels, numpy's
SIMD transcendentals win for tanh, and the compiled softmaxes delegate exp
to numpy while fusing the reductions.

MEMREPORT_KERNELS overrides: "py" forces pure numpy, "c" forces the
compiled set end to end (ImportError if the extension is missing).
"""

import os

from . import npkernels as _np

_choice = os.environ.get("MEMREPORT_KERNELS", "").strip().lower()

if _choice in ("c", "cy", "compiled"):
    from . import cykernels as _cy

    _have_cy = True
elif _choice in ("py", "python", "numpy"):
    _cy = None
    _have_cy = False
else:
    try:
        from . import cykernels as _cy

        _have_cy = True
    except ImportError:
        _cy = None
        _have_cy = False

if _choice in ("c", "cy", "compiled"):
    BACKEND = "compiled"
    _src = {}
elif not _have_cy:
    BACKEND = "python"
    _src = {}
else:
    BACKEND = "mixed"
    _src = {"tanh_fwd": _np}  # numpy's vectorized tanh beats scalar libm by >10x

_base = _cy if _have_cy else _np


def _pick(name):
    return getattr(_src.get(name, _base), name)


softmax_fwd = _pick("softmax_fwd")
softmax_bwd = _pick("softmax_bwd")
softmax_lse_fwd = _pick("softmax_lse_fwd")
layernorm_fwd = _pick("layernorm_fwd")
layernorm_bwd = _pick("layernorm_bwd")
sigmoid_fwd = _pick("sigmoid_fwd")
tanh_fwd = _pick("tanh_fwd")
adam_update = _pick("adam_update")
scatter_add_rows = _pick("scatter_add_rows")

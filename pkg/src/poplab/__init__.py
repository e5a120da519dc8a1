"""poplab: a desk-scale laboratory for trajectory prediction under
partial observations — masked-history self-supervision, teacher-student
feature distillation, open-loop metrics, and a closed-loop traffic
simulator, all on top of a small numpy autodiff core."""

__version__ = "0.1.0"

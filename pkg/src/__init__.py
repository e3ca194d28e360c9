"""cxr-distill: teacher -> assistant -> student knowledge distillation."""

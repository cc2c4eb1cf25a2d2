"""
Core modules: quadrature, quantizers, diffusion models, quantization trees,
the reflected BSDE solver and the benchmark harness.
"""

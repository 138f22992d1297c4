import os

class Config:
    # Root directory for run outputs: out/<run-id>/...
    OUTPUT_ROOT = os.getenv("LENSFLOW_OUTPUT_ROOT", "out")

    LOG_LEVEL = os.getenv("LENSFLOW_LOG_LEVEL", "INFO")

    # One intra-op thread keeps histories bit-identical between runs.
    TORCH_THREADS = int(os.getenv("LENSFLOW_TORCH_THREADS", "1"))

    # Train T1 and T2 side by side (at most two workers).
    PARALLEL_TORI = os.getenv("LENSFLOW_PARALLEL_TORI", "1") == "1"

    # Normalizer sample count per torus for the built-in experiments.
    N_MC = int(os.getenv("LENSFLOW_N_MC", "200000"))

import os

class Config:
    # Artifact directories are created below this root; the report browser reads from it.
    ARTIFACT_ROOT = os.getenv("LAB_ARTIFACT_ROOT", "artifacts")
    LOG_LEVEL = os.getenv("LAB_LOG_LEVEL", "INFO")
    # One of splu, cg, bicgstab.
    SOLVER = os.getenv("LAB_SOLVER", "splu")
    SOLVER_TOLERANCE = float(os.getenv("LAB_SOLVER_TOLERANCE", "1e-10"))
    SOLVER_MAXITER = int(os.getenv("LAB_SOLVER_MAXITER", "20000"))
    WORKERS = int(os.getenv("LAB_WORKERS", "4"))
    SEED = int(os.getenv("LAB_SEED", "20240101"))
    KAPPA_FACTOR = float(os.getenv("LAB_KAPPA_FACTOR", "8"))
    TAU = float(os.getenv("LAB_TAU", "0.125"))
    LAMBDA = float(os.getenv("LAB_LAMBDA", "0.01"))
    ETA = float(os.getenv("LAB_ETA", "0.125"))
    JSON_SORT_KEYS = True

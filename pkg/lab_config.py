import os
from dotenv import load_dotenv

load_dotenv()

class LabConfig:
    # Parallel replicates
    WORKERS = int(os.getenv("COALESCENT_WORKERS", "1"))
    REPLICATE_BLOCK = 256  # Fixed: block b always draws from stream (seed, b)

    # Logging
    LOG_LEVEL = os.getenv("COALESCENT_LOG_LEVEL", "INFO")
    LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

    # Exact oracles
    MAX_ENUMERATION_N = 7  # 56,700 merge histories at n=7
    MAX_ORACLE_STATES = int(os.getenv("COALESCENT_MAX_ORACLE_STATES", "2000000"))
    ORACLE_MAX_N = 60  # moment_regression adds propagated-oracle columns up to here
    CROSS_CHECK_MAX_N = int(os.getenv("COALESCENT_CROSS_CHECK_MAX_N", "2000"))  # exact branch/level sums

    # Output
    SIGNIFICANT_DIGITS = 12

    # Figure presets
    FIGURE2_N = 100
    FIGURE2_REPLICATES = 1000
    FIGURE3_PRESETS = {"small": 100, "large": 10_000}

    @classmethod
    def workers(cls) -> int:
        """Worker count, re-read from the environment so late overrides apply."""
        value = os.getenv("COALESCENT_WORKERS")
        if value is None:
            return cls.WORKERS
        return max(1, int(value))

import os
import sys
from datetime import datetime


def log(message: str, level: str = "INFO"):
    """Log message to stderr with timestamp. stdout stays free for command output."""
    if level == "INFO" and os.getenv("HPRN_QUIET") == "1":
        return
    timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
    print(f"[{timestamp}] {level} {message}", file=sys.stderr, flush=True)

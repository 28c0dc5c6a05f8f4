import json
import os

from dotenv import load_dotenv

load_dotenv()


def print_json(json_obj):
    """Pretty print JSON data"""
    if isinstance(json_obj, str):
        try:
            json_obj = json.loads(json_obj)
        except json.JSONDecodeError:
            pass
    print(json.dumps(json_obj, indent=2))


def worker_threads() -> int:
    """Worker pool size from MAMSR_THREADS (default 1)."""
    raw = os.environ.get("MAMSR_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        threads = int(raw)
    except ValueError:
        print(f"⚠️  MAMSR_THREADS={raw!r} is not an integer, using 1 worker")
        return 1
    if threads < 1:
        print(f"⚠️  MAMSR_THREADS={threads} is below 1, using 1 worker")
        return 1
    return threads

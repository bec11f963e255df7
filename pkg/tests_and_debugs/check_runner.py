#!/usr/bin/env python3
"""
Check Runner
Runs every test_* function of a test script and prints one status line per test.
"""

import time
import traceback


def run_tests(namespace: dict, title: str) -> int:
    """Run the test_* callables in `namespace` in name order; returns the number of failures."""
    tests = [(name, fn) for name, fn in sorted(namespace.items()) if name.startswith('test_') and callable(fn)]
    print(f"🧪 {title}")
    print("=" * 50)
    failed = 0
    for name, fn in tests:
        started = time.perf_counter()
        try:
            fn()
            print(f"✅ {name} ({time.perf_counter() - started:.2f}s)")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e!r}")
            traceback.print_exc()
    print("=" * 50)
    print(f"{len(tests) - failed}/{len(tests)} passed")
    return failed

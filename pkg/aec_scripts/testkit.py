"""
Shared helpers for the test scripts: path setup, the slow marker and a
plain runner so every test_*.py also works as `python3 test_x.py`
"""

import os
import pathlib
import sys
import tempfile
import time
import traceback

import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

RUN_SLOW = os.getenv('E2EAEC_RUN_SLOW') == '1'

slow = pytest.mark.skipif(not RUN_SLOW, reason='long-running; set E2EAEC_RUN_SLOW=1')


def _skipped(fn) -> bool:
    for mark in getattr(fn, 'pytestmark', []):
        if mark.name == 'skipif' and mark.args and mark.args[0]:
            return True
    return False


def _cases(fn):
    """Argument tuples of a test; pytest.mark.parametrize lists are expanded"""
    for mark in getattr(fn, 'pytestmark', []):
        if mark.name == 'parametrize':
            names = [n.strip() for n in mark.args[0].split(',')]
            return [(v if len(names) > 1 else (v,)) for v in mark.args[1]]
    return [()]


def run_tests(namespace: dict, title: str) -> int:
    """Run every test_* function of a module namespace; returns the process exit code"""
    print(f"🧪 {title}")
    print("=" * 50)
    tests = [(name, fn) for name, fn in namespace.items() if name.startswith('test_') and callable(fn)]
    failed = skipped = 0
    for name, fn in tests:
        if _skipped(fn):
            print(f"⏭️  {name} (slow, skipped)")
            skipped += 1
            continue
        tmp_needed = 'tmp_path' in fn.__code__.co_varnames[:fn.__code__.co_argcount]
        start = time.time()
        try:
            for args in _cases(fn):
                if tmp_needed:
                    with tempfile.TemporaryDirectory() as tmp:
                        fn(*args, pathlib.Path(tmp))
                else:
                    fn(*args)
            print(f"✅ {name} ({time.time() - start:.2f}s)")
        except Exception:
            failed += 1
            print(f"❌ {name}")
            traceback.print_exc()
    print("=" * 50)
    print(f"{len(tests) - failed - skipped} passed, {failed} failed, {skipped} skipped")
    return 1 if failed else 0

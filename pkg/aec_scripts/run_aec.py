#!/usr/bin/env python3
"""
Run script for the echo canceller
Runs the whole pipeline (synth -> train -> eval -> tde) into one run directory
"""

import argparse
import os
import sys
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))
from main_aec import EXIT_OK, main as aec_main


def check_environment() -> bool:
    """Check that the numeric stack imports"""
    missing = []
    for module in ('numpy', 'scipy', 'pandas', 'dotenv', 'colorama'):
        try:
            __import__(module)
        except ImportError:
            missing.append(module)

    if missing:
        print(f"❌ Missing Python packages: {', '.join(missing)}")
        print("Run ./ubuntu_setup.sh or pip install -r requirements.txt first.")
        return False

    print("✅ All required packages are installed")
    return True


def pipeline(run_dir: str, preset: str, config: str = None):
    """Command lines of the four pipeline stages"""
    common = ['--config', config] if config else []
    data = os.path.join(run_dir, 'data')
    train = os.path.join(run_dir, 'train')
    checkpoint = os.path.join(train, 'model.ckpt')
    return [
        ('📦 Synthesizing dataset', ['synth', '--out', data] + common),
        ('🧠 Training', ['train', '--out', train, '--data', data, '--preset', preset] + common),
        ('📊 Evaluating', ['eval', '--out', os.path.join(run_dir, 'eval'), '--data', data,
                          '--checkpoint', checkpoint, '--preset', preset] + common),
        ('⏱️ Tracking delay', ['tde', '--out', os.path.join(run_dir, 'tde'), '--checkpoint', checkpoint,
                              '--preset', preset] + common),
    ]


def main():
    """Main entry point"""
    parser = argparse.ArgumentParser(description='synth -> train -> eval -> tde in one run directory')
    parser.add_argument('--run-dir', default='runs/latest')
    parser.add_argument('--preset', default='full')
    parser.add_argument('--config', help='key=value config file shared by every stage')
    args = parser.parse_args()

    print("🔊 E2E-AEC Pipeline - Starting Up...")
    print("=" * 60)

    if not check_environment():
        sys.exit(1)

    try:
        for title, argv in pipeline(args.run_dir, args.preset, args.config):
            print(f"\n{title}...")
            code = aec_main(argv)
            if code != EXIT_OK:
                print(f"❌ {argv[0]} failed with exit code {code}")
                sys.exit(code)
            print(f"✅ {argv[0]} done")
    except KeyboardInterrupt:
        print("\n🛑 Pipeline stopped by user")
        sys.exit(1)

    print(f"\n🎉 Pipeline finished. Results under {args.run_dir}")


if __name__ == "__main__":
    main()

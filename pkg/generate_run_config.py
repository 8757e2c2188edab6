#!/usr/bin/env python3
"""
Generate a ready-to-run JSON run config for a backbone preset and booster variant.
The document is validated with the same resolver the CLI uses before it is written.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from backbones import BACKBONE_PRESETS
from booster import BoosterVariant
from llm_block import LLM_PRESETS
from run_config import RunConfigError, default_config, resolve


def get_project_root():
    """Get the absolute path to the project root."""
    return str(Path(__file__).parent.absolute())


def generate_config(preset, variant, llm_preset, data_kind, data_path, output_dir, epochs):
    """Build and validate a run config document.

    Returns:
        (document, resolved) where ``resolved`` is the fully defaulted config.
    """
    doc = default_config(preset=preset, variant=variant, llm_preset=llm_preset, data_kind=data_kind,
                         data_path=data_path, output_dir=output_dir, epochs=epochs)
    return doc, resolve(doc).to_dict()


def main(argv=None):
    """Main function."""
    parser = argparse.ArgumentParser(description="Generate a run config for booster_cli.py")
    parser.add_argument("--preset", choices=sorted(BACKBONE_PRESETS), default="vit-tiny")
    parser.add_argument("--variant", choices=[v.value for v in BoosterVariant], default="r-llm")
    parser.add_argument("--llm-preset", choices=sorted(LLM_PRESETS), default="desk")
    parser.add_argument("--data-kind", choices=("synthetic", "npz", "dir"), default="synthetic")
    parser.add_argument("--data-path", help="NPZ file or NPY directory (npz/dir data kinds)")
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--output-dir", help="Run directory (default: runs/<preset>-<variant>)")
    parser.add_argument("--out", help="Where to write the config (default: print only)")
    parser.add_argument("--resolved", action="store_true", help="Write the fully defaulted config")
    parser.add_argument("--force", action="store_true", help="Overwrite an existing file without asking")
    args = parser.parse_args(argv)

    output_dir = args.output_dir or os.path.join("runs", f"{args.preset}-{args.variant}")
    try:
        doc, resolved = generate_config(args.preset, args.variant, args.llm_preset, args.data_kind,
                                        args.data_path, output_dir, args.epochs)
    except RunConfigError as e:
        print(f"❌ Invalid run config: {e}")
        return 2
    config = resolved if args.resolved else doc

    print("🔧 Generated run config:")
    print(json.dumps(config, indent=2))
    print()

    if not args.out:
        print("💡 Pass --out <file> to save it, then run: python booster_cli.py train <file>")
        return 0

    config_path = Path(args.out)
    if config_path.exists() and not args.force:
        print("⚠️  Config file already exists.")
        response = input("Do you want to overwrite it? (y/N): ").lower().strip()
        if response not in ['y', 'yes']:
            print("Config file not written.")
            return 0

    try:
        config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(config_path, 'w') as f:
            json.dump(config, f, indent=2)
            f.write("\n")
        print(f"✅ Config written to {config_path}")
    except OSError as e:
        print(f"❌ Error writing config: {e}")
        return 1

    print()
    print("📋 Next steps:")
    print(f"1. Check the parameter budget: python booster_cli.py params {config_path}")
    print(f"2. Train: python booster_cli.py train {config_path}")
    print(f"3. Results land in {output_dir}/metrics.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
Bootstrap for the frozen-LLM booster toolkit: virtual environment,
requirements, a .env template and a smoke check of the CLI.
"""

import argparse
import subprocess
import sys
import venv
from pathlib import Path

ROOT = Path(__file__).resolve().parent
ENV_TEMPLATE = """# Evaluation worker threads (default: CPU count)
FB_THREADS=
# Logging level: DEBUG, INFO, WARNING, ERROR
FB_LOG_LEVEL=INFO
# Optional extra log file; train runs always write <run_dir>/run.log
FB_LOG_FILE=
"""


def _venv_python(venv_dir: Path) -> Path:
    scripts = "Scripts" if sys.platform == "win32" else "bin"
    return venv_dir / scripts / ("python.exe" if sys.platform == "win32" else "python")


def _run(*argv) -> bool:
    result = subprocess.run([str(a) for a in argv], cwd=ROOT, capture_output=True, text=True)
    if result.returncode != 0:
        print(f"❌ {' '.join(str(a) for a in argv)} failed:\n{result.stderr.strip()}")
    return result.returncode == 0


def prepare_python(venv_dir: Path, use_venv: bool) -> Path:
    if not use_venv:
        print(f"⚠️  Using the current interpreter: {sys.executable}")
        return Path(sys.executable)
    if venv_dir.exists():
        print(f"⚠️  {venv_dir.name}/ already exists, reusing it")
    else:
        print(f"📦 Creating {venv_dir.name}/ ...")
        venv.create(venv_dir, with_pip=True)
    return _venv_python(venv_dir)


def write_env_template(path: Path) -> None:
    if path.exists():
        print("⚠️  .env already exists, leaving it alone")
        return
    path.write_text(ENV_TEMPLATE)
    print("📝 Wrote .env template")


def main() -> int:
    parser = argparse.ArgumentParser(description="Set up the frozen-LLM booster toolkit")
    parser.add_argument("--no-venv", action="store_true", help="install into the current interpreter")
    parser.add_argument("--venv-dir", default="venv", help="virtual environment directory (default: venv)")
    args = parser.parse_args()

    print("🚀 Frozen-LLM Booster Setup")
    if sys.version_info < (3, 9):
        print(f"❌ Python 3.9 or higher is required, found {sys.version.split()[0]}")
        return 1

    python = prepare_python(ROOT / args.venv_dir, not args.no_venv)
    print("📚 Installing requirements...")
    if not _run(python, "-m", "pip", "install", "-r", ROOT / "requirements.txt"):
        return 1
    write_env_template(ROOT / ".env")

    print("🧪 Checking the CLI...")
    if not _run(python, ROOT / "booster_cli.py", "--help"):
        return 1

    print("✅ Setup completed successfully!\n")
    print("📋 Next steps:")
    print("1. python generate_run_config.py --variant r-llm --out runs/blobs.json")
    print("2. python booster_cli.py params runs/blobs.json")
    print("3. python booster_cli.py train runs/blobs.json")
    print("💡 Compare variants: python booster_cli.py sweep runs/blobs.json --variants baseline,r-llm,mlp-control")
    return 0


if __name__ == "__main__":
    sys.exit(main())

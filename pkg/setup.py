"""
Setup Script - Clustering Mask Transformer Toolkit
Run this script to install the dependencies and check the installation
"""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent


def print_header(text):
    """Print formatted header"""
    print("\n" + "=" * 60)
    print(f"  {text}")
    print("=" * 60 + "\n")


def run_command(command, description):
    """Run a command and handle errors"""
    print(f"[..] {description}")
    try:
        subprocess.check_call(command, cwd=ROOT)
        print(f"[ok] {description}\n")
        return True
    except subprocess.CalledProcessError as e:
        print(f"[!!] {description} - FAILED")
        print(f"Error: {e}\n")
        return False


def check_imports():
    """Report the version of every required package"""
    missing = []
    for module in ('numpy', 'scipy', 'sklearn', 'pandas', 'tqdm', 'pytest'):
        try:
            imported = __import__(module)
            print(f"[ok] {module}: {getattr(imported, '__version__', 'unknown')}")
        except ImportError:
            print(f"[!!] {module}: NOT INSTALLED")
            missing.append(module)
    return missing


def main():
    """Main setup process"""
    print_header("Clustering Mask Transformer Toolkit - Setup")

    print_header("Step 1: Installing Python Dependencies")
    if not run_command([sys.executable, '-m', 'pip', 'install', '-r', 'requirements.txt'],
                       "Installing packages from requirements.txt"):
        print("Warning: some packages may have failed to install.")

    print_header("Step 2: Verifying Installation")
    missing = check_imports()

    print_header("Step 3: Gradient Check")
    passed = run_command([sys.executable, 'app.py', '--quiet', 'gradcheck', '--size', 'tiny'],
                         "Running the tiny gradient check")

    print_header("Setup Complete")
    if missing or not passed:
        print("Setup finished with problems; see the messages above.")
        return 1
    print("Try the demo pipeline with: ./run.sh")
    return 0


if __name__ == "__main__":
    sys.exit(main())

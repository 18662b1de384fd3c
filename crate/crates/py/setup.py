"""Builds the `gridvid` extension module by delegating to cargo.

No maturin/setuptools-rust here: the extension is a plain cdylib that
cargo produces, and this file just places it where setuptools expects
the built artifact. Install with:

    pip install -e . --no-build-isolation
"""

import pathlib
import shutil
import subprocess

from setuptools import setup
from setuptools.command.build_ext import build_ext
from setuptools.extension import Extension

CRATE_DIR = pathlib.Path(__file__).resolve().parent
WORKSPACE = CRATE_DIR.parent.parent


class CargoExtension(Extension):
    def __init__(self, name):
        super().__init__(name, sources=[])


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.check_call(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                "gridvid-py",
                "--features",
                "extension-module",
            ],
            cwd=WORKSPACE,
        )
        built = WORKSPACE / "target" / "release" / "libgridvid.so"
        target = pathlib.Path(self.get_ext_fullpath(ext.name))
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, target)


setup(
    ext_modules=[CargoExtension("gridvid")],
    cmdclass={"build_ext": CargoBuildExt},
)

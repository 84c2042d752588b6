"""Build hook that compiles the Rust signature backend with cargo."""

import shutil
import subprocess
import sys
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent


class CargoExtension(Extension):
    def __init__(self, name: str, crate_dir: str):
        super().__init__(name, sources=[])
        self.crate_dir = crate_dir


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        if not isinstance(ext, CargoExtension):
            return super().build_extension(ext)
        crate = ROOT / ext.crate_dir
        subprocess.run(["cargo", "build", "--release"], cwd=crate, check=True)
        suffix = ".dylib" if sys.platform == "darwin" else ".so"
        built = crate / "target" / "release" / f"libpqfl_pqclean{suffix}"
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)
        # Keep a copy next to the sources so editable installs and in-tree
        # pytest runs resolve the module without a second build.
        inplace = ROOT / "src" / "pqfl" / dest.name
        shutil.copy2(built, inplace)


setup(
    ext_modules=[CargoExtension("pqfl._pqclean", "native")],
    cmdclass={"build_ext": CargoBuildExt},
)

"""Regenerate the bundled mesh files in meshes/.

Run from the repository root:

    python3 tools/gen_meshes.py

The starshade config pins the dodecagon vertex ids printed here.
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parents[1] / "src"))

from platebend import meshgen
from platebend.mesh import compute_sizes, save_mesh


def main() -> None:
    out = pathlib.Path(__file__).resolve().parents[1] / "meshes"
    out.mkdir(exist_ok=True)

    diamond = meshgen.diamond_mesh(n=8)
    save_mesh(diamond, out / "diamond.mesh")
    sizes = compute_sizes(diamond)
    print(f"diamond.mesh: {diamond.cells.shape[0]} cells, max h = {sizes.h_cell.max():.6f}")

    star, info = meshgen.starshade_mesh(q=4, m=3)
    save_mesh(star, out / "starshade.mesh")
    sizes = compute_sizes(star)
    print(f"starshade.mesh: {star.cells.shape[0]} cells, max h = {sizes.h_cell.max():.6f}")
    print(f"  valley ids:   {info['valley_ids']}")
    print(f"  mountain ids: {info['mountain_ids']}")
    print(f"  all outer:    {info['outer_ids']}")


if __name__ == "__main__":
    main()

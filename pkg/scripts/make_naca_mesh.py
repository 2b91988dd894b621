"""Write the O-grid around the NACA 0012 profile in the native mesh format.

Usage: python scripts/make_naca_mesh.py [n_around] [n_radial] [radius] [output]
The wall is tagged slip-wall; load it with the naca0012 wall curve to restore
the curved boundary representation.
"""
import sys

from hphdg.mesh import naca_ogrid, write_native


def main(argv):
    n_around = int(argv[1]) if len(argv) > 1 else 40
    n_radial = int(argv[2]) if len(argv) > 2 else 12
    radius = float(argv[3]) if len(argv) > 3 else 10.0
    out = argv[4] if len(argv) > 4 else f"meshes/naca0012_o{n_around}x{n_radial}.mesh"
    mesh = naca_ogrid(n_around, n_radial, radius)
    write_native(mesh, out)
    print(f"wrote {out}: {mesh.n_elements} elements, {mesh.n_vertices} vertices")


if __name__ == "__main__":
    main(sys.argv)

"""Point clouds, triangle meshes and their ASCII PLY serialization."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .fileio import FormatError


@dataclass
class PointCloud:
    points: np.ndarray
    alpha: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
            if self.alpha.shape[0] != self.points.shape[0]:
                raise ValueError("alpha length does not match point count")

    def __len__(self):
        return self.points.shape[0]


@dataclass
class MeshLite:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ValueError("triangle index out of range")

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def signed_volume(self):
        """Signed enclosed volume; the sign tells the winding convention."""
        v = self.vertices[self.triangles]
        return float(np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) / 6.0)


def write_ply(path, cloud=None, mesh=None):
    """Write a point cloud (x y z [alpha]) or a mesh as ASCII PLY."""
    if (cloud is None) == (mesh is None):
        raise ValueError("pass exactly one of cloud or mesh")
    lines = ["ply", "format ascii 1.0"]
    if cloud is not None:
        pts = cloud.points
        has_alpha = cloud.alpha is not None
        lines += [f"element vertex {len(pts)}", "property double x", "property double y",
                  "property double z"]
        if has_alpha:
            lines.append("property double alpha")
        lines.append("end_header")
        for i, p in enumerate(pts):
            row = [repr(float(c)) for c in p]
            if has_alpha:
                row.append(repr(float(cloud.alpha[i])))
            lines.append(" ".join(row))
    else:
        lines += [f"element vertex {len(mesh.vertices)}", "property double x", "property double y",
                  "property double z", f"element face {len(mesh.triangles)}",
                  "property list uchar int vertex_indices", "end_header"]
        lines += [" ".join(repr(float(c)) for c in v) for v in mesh.vertices]
        lines += ["3 " + " ".join(str(int(i)) for i in t) for t in mesh.triangles]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ply(path):
    """Read what :func:`write_ply` writes. Returns a PointCloud or MeshLite."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply" or lines[1] != "format ascii 1.0":
        raise FormatError(f"{path}: not an ASCII PLY file")
    n_vert = n_face = 0
    props = []
    i = 2
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[0] == "element" and parts[1] == "vertex":
            n_vert = int(parts[2])
        elif parts[0] == "element" and parts[1] == "face":
            n_face = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props.append(parts[-1])
        i += 1
    body = lines[i + 1:]
    vert = np.array([[float(x) for x in body[j].split()] for j in range(n_vert)]).reshape(n_vert, -1)
    if n_face:
        faces = np.array([[int(x) for x in body[n_vert + j].split()[1:]] for j in range(n_face)])
        return MeshLite(vert[:, :3], faces)
    alpha = vert[:, 3] if "alpha" in props else None
    return PointCloud(vert[:, :3], alpha)

"""Structured Cartesian grids and unstructured conforming triangle meshes.

Covers GMSH MSH 2.2 ASCII ingestion, per-edge diamond geometry (normals,
tangents, projected distances, deformation ratio) and least-squares nodal
reconstruction weights used by the gradient schemes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import GeometryError, MeshFormatError, MeshValidationError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StructuredGrid:
    """Uniform Cartesian grid of nx x ny cells."""

    nx: int
    ny: int
    dx: float
    dy: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise MeshValidationError("cell counts must be >= 1")
        if self.dx <= 0.0 or self.dy <= 0.0:
            raise MeshValidationError("spacings must be positive")

    @property
    def lx(self) -> float:
        return self.nx * self.dx

    @property
    def ly(self) -> float:
        return self.ny * self.dy

    @property
    def x_centers(self) -> np.ndarray:
        return self.origin[0] + (np.arange(self.nx) + 0.5) * self.dx

    @property
    def y_centers(self) -> np.ndarray:
        return self.origin[1] + (np.arange(self.ny) + 0.5) * self.dy

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) center coordinates with shape (ny, nx)."""
        return np.meshgrid(self.x_centers, self.y_centers)

    @property
    def cell_area(self) -> float:
        return self.dx * self.dy


class TriMesh:
    """Conforming triangle mesh; immutable after construction.

    nodes: (N, 2); cells: (M, 3) node triples, counterclockwise;
    edges: (E, 2) node pairs ordered along the edge tangent;
    edge_cells: (E, 2) adjacent cells (K, L), L = -1 on the boundary;
    boundary_tag: (E,) physical tag of boundary edges (0 when untagged).
    """

    def __init__(self, nodes, cells, edge_tags: dict | None = None):
        nodes = np.asarray(nodes, dtype=float)
        cells = np.asarray(cells, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshValidationError("nodes must be an (N, 2) array")
        if cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshValidationError("cells must be an (M, 3) array")
        if not np.all(np.isfinite(nodes)):
            raise MeshValidationError("non-finite node coordinates")
        if cells.min(initial=0) < 0 or cells.max(initial=-1) >= len(nodes):
            raise MeshValidationError("cell refers to a missing node")

        a = nodes[cells[:, 0]]
        b = nodes[cells[:, 1]]
        c = nodes[cells[:, 2]]
        signed = 0.5 * np.cross(b - a, c - a)
        scale = max(float(np.max(np.abs(nodes))), 1.0)
        if np.any(np.abs(signed) <= 1.0e-14 * scale * scale):
            bad = int(np.argmin(np.abs(signed)))
            raise MeshValidationError(f"cell {bad} is degenerate (zero area)")
        flip = signed < 0.0
        if np.any(flip):
            cells = cells.copy()
            cells[flip, 1], cells[flip, 2] = cells[flip, 2], cells[flip, 1]
            signed = np.abs(signed)

        self.nodes = nodes
        self.cells = cells
        self.areas = signed
        self.centroids = (nodes[cells[:, 0]] + nodes[cells[:, 1]] + nodes[cells[:, 2]]) / 3.0

        # undirected edge table; conformity demands <= 2 incident cells per
        # edge with opposite traversal directions (guaranteed by consistent
        # counterclockwise winding unless cells overlap)
        incidence: dict[tuple[int, int], list[tuple[int, int]]] = {}
        for m in range(len(cells)):
            tri = cells[m]
            for i in range(3):
                na, nb = int(tri[i]), int(tri[(i + 1) % 3])
                key = (na, nb) if na < nb else (nb, na)
                incidence.setdefault(key, []).append((m, +1 if na < nb else -1))
        keys = sorted(incidence)
        edges = np.array(keys, dtype=np.int64).reshape(len(keys), 2)
        edge_cells = np.full((len(keys), 2), -1, dtype=np.int64)
        for e, key in enumerate(keys):
            inc = incidence[key]
            if len(inc) > 2:
                raise MeshValidationError(f"edge {key} shared by {len(inc)} cells")
            if len(inc) == 2:
                if inc[0][1] == inc[1][1]:
                    raise MeshValidationError(
                        f"edge {key} traversed twice in the same direction "
                        "(overlapping or inconsistently wound cells)"
                    )
                edge_cells[e] = sorted((inc[0][0], inc[1][0]))
            else:
                edge_cells[e, 0] = inc[0][0]
        self.edges = edges
        self.edge_cells = edge_cells

        tags = np.zeros(len(keys), dtype=np.int64)
        if edge_tags:
            norm = {}
            for (na, nb), t in edge_tags.items():
                norm[(na, nb) if na < nb else (nb, na)] = int(t)
            for e, key in enumerate(keys):
                if key in norm:
                    tags[e] = norm[key]
        self.boundary_tag = tags

        self.n_nodes = len(nodes)
        self.n_cells = len(cells)
        self.n_edges = len(keys)
        self.interior = edge_cells[:, 1] >= 0

        # node -> adjacent cells (sorted, deterministic)
        node_cells: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for m in range(self.n_cells):
            for nid in cells[m]:
                node_cells[int(nid)].append(m)
        self.node_cells = [np.array(sorted(set(lst)), dtype=np.int64) for lst in node_cells]
        if any(len(lst) == 0 for lst in self.node_cells):
            raise MeshValidationError("mesh contains an unused node")

    def incircle_diameters(self) -> np.ndarray:
        """Per-cell inscribed-circle diameter 4*area/perimeter."""
        p = self.nodes[self.cells]
        per = (
            np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
            + np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
            + np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        )
        return 4.0 * self.areas / per


@dataclass
class EdgeGeom:
    """Per-edge diamond geometry, arrays indexed like mesh.edges.

    n / tau: unit outward normal from K and tangent with (n, tau) direct;
    x_e: edge midpoint; x_star: intersection of the centroid line with the
    edge line; length: |e|; l, l_minus, l_plus: centroid distances split at
    x_star; h, h_minus, h_plus: the same split projected on n; kappa:
    tangential-over-normal deformation ratio of the centroid line;
    end_minus / end_plus: endpoint node ids ordered along tau. Boundary
    edges carry one-sided data (plus-side entries are NaN).
    """

    n: np.ndarray
    tau: np.ndarray
    x_e: np.ndarray
    x_star: np.ndarray
    length: np.ndarray
    l: np.ndarray
    l_minus: np.ndarray
    l_plus: np.ndarray
    h: np.ndarray
    h_minus: np.ndarray
    h_plus: np.ndarray
    kappa: np.ndarray
    end_minus: np.ndarray = field(default=None)
    end_plus: np.ndarray = field(default=None)
    boundary: np.ndarray = field(default=None)


def edge_geometry(mesh: TriMesh) -> EdgeGeom:
    """Diamond geometry for every edge; aborts on degenerate configurations."""
    pa = mesh.nodes[mesh.edges[:, 0]]
    pb = mesh.nodes[mesh.edges[:, 1]]
    t = pb - pa
    length = np.linalg.norm(t, axis=1)
    n = np.stack([t[:, 1], -t[:, 0]], axis=1) / length[:, None]
    x_e = 0.5 * (pa + pb)
    cK = mesh.centroids[mesh.edge_cells[:, 0]]
    outward = np.einsum("ei,ei->e", x_e - cK, n)
    swap = outward < 0.0
    n[swap] = -n[swap]
    tau = np.stack([-n[:, 1], n[:, 0]], axis=1)

    # endpoints ordered along tau
    backwards = np.einsum("ei,ei->e", pb - pa, tau) < 0.0
    end_minus = np.where(backwards, mesh.edges[:, 1], mesh.edges[:, 0])
    end_plus = np.where(backwards, mesh.edges[:, 0], mesh.edges[:, 1])

    interior = mesh.interior
    cL = np.where(interior[:, None], mesh.centroids[mesh.edge_cells[:, 1]], x_e)
    d = cL - cK
    h = np.einsum("ei,ei->e", d, n)
    h_minus = np.einsum("ei,ei->e", x_e - cK, n)
    if np.any(h <= 0.0):
        bad = int(np.argmin(h))
        raise GeometryError(
            f"edge {bad} (nodes {tuple(mesh.edges[bad])}): centroid line does "
            f"not cross the edge outward (h = {h[bad]:.3e})"
        )
    l = np.linalg.norm(d, axis=1)
    with np.errstate(invalid="ignore"):
        s = np.where(interior, h_minus / h, 1.0)
    x_star = np.where(interior[:, None], cK + s[:, None] * d, x_e)
    l_minus = np.where(interior, s * l, np.linalg.norm(x_e - cK, axis=1))
    l_plus = np.where(interior, (1.0 - s) * l, np.nan)
    h_plus = np.where(interior, h - h_minus, np.nan)
    l = np.where(interior, l, l_minus)
    kappa = np.where(
        interior,
        np.einsum("ei,ei->e", d, tau) / h,
        np.einsum("ei,ei->e", x_e - cK, tau) / h_minus,
    )
    if np.any(h_minus <= 0.0):
        bad = int(np.argmin(h_minus))
        raise GeometryError(
            f"edge {bad} (nodes {tuple(mesh.edges[bad])}): centroid on the "
            "wrong side of the edge"
        )
    return EdgeGeom(
        n=n, tau=tau, x_e=x_e, x_star=x_star, length=length,
        l=l, l_minus=l_minus, l_plus=l_plus,
        h=np.where(interior, h, h_minus), h_minus=h_minus, h_plus=h_plus,
        kappa=kappa, end_minus=end_minus, end_plus=end_plus, boundary=~interior,
    )


@dataclass
class NodalLSWeights:
    """Least-squares nodal reconstruction: value at node = (matrix @ cell values)."""

    matrix: sp.csr_matrix
    fallback_nodes: np.ndarray

    def __call__(self, cell_values: np.ndarray) -> np.ndarray:
        flat = cell_values.reshape(cell_values.shape[0], -1)
        out = self.matrix @ flat
        return out.reshape((self.matrix.shape[0],) + cell_values.shape[1:])


def nodal_ls_weights(mesh: TriMesh) -> NodalLSWeights:
    """Per-node least-squares weights over adjacent cells.

    w_K = (1 - lambda.(x_K - x_n)) / (p - lambda.I) with lambda = J^-1 I,
    I = sum(x_K - x_n), J = sum (x_K - x_n)(x_K - x_n)^T. The weights sum
    to one and reproduce affine fields exactly. Stencils with singular J or
    a vanishing denominator fall back to inverse-distance weights.
    """
    rows, cols, vals = [], [], []
    fallback = []
    for nid in range(mesh.n_nodes):
        adj = mesh.node_cells[nid]
        dx = mesh.centroids[adj] - mesh.nodes[nid]
        p = len(adj)
        w = None
        if p >= 3:
            I = dx.sum(axis=0)
            J = dx.T @ dx
            det = J[0, 0] * J[1, 1] - J[0, 1] * J[1, 0]
            tr = J[0, 0] + J[1, 1]
            if det > 1.0e-10 * (0.5 * tr) ** 2:
                lam = np.linalg.solve(J, I)
                den = p - lam @ I
                if abs(den) > 1.0e-8 * p:
                    w = (1.0 - dx @ lam) / den
        if w is None or not np.all(np.isfinite(w)) or np.sum(np.abs(w)) > 1.0e3:
            r = np.linalg.norm(dx, axis=1)
            inv = 1.0 / np.maximum(r, 1.0e-300)
            w = inv / inv.sum()
            fallback.append(nid)
        rows.extend([nid] * p)
        cols.extend(adj.tolist())
        vals.extend(w.tolist())
    if fallback:
        log.info("nodal least squares fell back to inverse-distance at %d node(s)", len(fallback))
    matrix = sp.csr_matrix(
        (vals, (rows, cols)), shape=(mesh.n_nodes, mesh.n_cells)
    )
    return NodalLSWeights(matrix=matrix, fallback_nodes=np.array(fallback, dtype=np.int64))


def load_gmsh(stream) -> TriMesh:
    """Parse MSH 2.2 ASCII content into a validated TriMesh.

    Triangles (element type 2) become cells; 2-node lines (type 1) only
    contribute their physical tag to the matching boundary edge; every
    other element type is ignored.
    """
    if isinstance(stream, str):
        lines = stream.splitlines()
    else:
        lines = stream.read().splitlines()

    def fail(msg, ln):
        raise MeshFormatError(msg, line=ln + 1)

    i = 0
    node_ids: list[int] = []
    coords: list[tuple[float, float]] = []
    tri_nodes: list[tuple[int, int, int]] = []
    line_elems: list[tuple[int, int, int]] = []
    saw_nodes = saw_elements = False

    while i < len(lines):
        word = lines[i].strip()
        if word == "$MeshFormat":
            if i + 1 >= len(lines):
                fail("truncated $MeshFormat section", i)
            parts = lines[i + 1].split()
            if not parts or not parts[0].startswith("2.2"):
                fail(f"unsupported MSH version {parts[0] if parts else '<empty>'}; need 2.2", i + 1)
            if len(parts) > 1 and parts[1] != "0":
                fail("binary MSH files are not supported", i + 1)
            i += 2
            while i < len(lines) and lines[i].strip() != "$EndMeshFormat":
                i += 1
            if i == len(lines):
                fail("missing $EndMeshFormat", len(lines) - 1)
            i += 1
        elif word == "$Nodes":
            saw_nodes = True
            if i + 1 >= len(lines):
                fail("truncated $Nodes section", i)
            try:
                count = int(lines[i + 1])
            except ValueError:
                fail(f"bad node count {lines[i + 1]!r}", i + 1)
            for k in range(count):
                ln = i + 2 + k
                if ln >= len(lines):
                    fail("unexpected end of file inside $Nodes", len(lines) - 1)
                parts = lines[ln].split()
                if len(parts) < 4:
                    fail(f"node line needs 'id x y z', got {lines[ln]!r}", ln)
                try:
                    node_ids.append(int(parts[0]))
                    coords.append((float(parts[1]), float(parts[2])))
                except ValueError:
                    fail(f"malformed node line {lines[ln]!r}", ln)
            i += 2 + count
            if i >= len(lines) or lines[i].strip() != "$EndNodes":
                fail("missing $EndNodes (node count mismatch?)", min(i, len(lines) - 1))
            i += 1
        elif word == "$Elements":
            saw_elements = True
            if i + 1 >= len(lines):
                fail("truncated $Elements section", i)
            try:
                count = int(lines[i + 1])
            except ValueError:
                fail(f"bad element count {lines[i + 1]!r}", i + 1)
            for k in range(count):
                ln = i + 2 + k
                if ln >= len(lines):
                    fail("unexpected end of file inside $Elements", len(lines) - 1)
                parts = lines[ln].split()
                if len(parts) < 3:
                    fail(f"element line too short: {lines[ln]!r}", ln)
                try:
                    etype = int(parts[1])
                    ntags = int(parts[2])
                    tags = [int(x) for x in parts[3 : 3 + ntags]]
                    conn = [int(x) for x in parts[3 + ntags :]]
                except ValueError:
                    fail(f"malformed element line {lines[ln]!r}", ln)
                if etype == 2:
                    if len(conn) != 3:
                        fail(f"triangle with {len(conn)} nodes", ln)
                    tri_nodes.append(tuple(conn))
                elif etype == 1:
                    if len(conn) != 2:
                        fail(f"line element with {len(conn)} nodes", ln)
                    line_elems.append((conn[0], conn[1], tags[0] if tags else 0))
                # anything else (points, quads, ...) is ignored
            i += 2 + count
            if i >= len(lines) or lines[i].strip() != "$EndElements":
                fail("missing $EndElements (element count mismatch?)", min(i, len(lines) - 1))
            i += 1
        elif word.startswith("$") and not word.startswith("$End"):
            # skip unknown section up to its matching end marker
            endmark = "$End" + word[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != endmark:
                j += 1
            if j == len(lines):
                fail(f"missing {endmark}", len(lines) - 1)
            i = j + 1
        else:
            i += 1

    if not saw_nodes:
        raise MeshFormatError("no $Nodes section found")
    if not saw_elements:
        raise MeshFormatError("no $Elements section found")
    if not tri_nodes:
        raise MeshFormatError("mesh contains no triangles")

    remap = {gid: k for k, gid in enumerate(node_ids)}
    if len(remap) != len(node_ids):
        raise MeshFormatError("duplicate node ids in $Nodes")
    try:
        cells = np.array([[remap[a], remap[b], remap[c]] for a, b, c in tri_nodes], dtype=np.int64)
        edge_tags = {(remap[a], remap[b]): t for a, b, t in line_elems}
    except KeyError as exc:
        raise MeshFormatError(f"element refers to unknown node id {exc.args[0]}") from None
    return TriMesh(np.array(coords), cells, edge_tags=edge_tags)

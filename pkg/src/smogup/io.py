"""Readers and writers for XYZ, OFF and ASCII PLY files."""

import numpy as np

from .geometry import TriangleMesh, as_points


class ParseError(ValueError):
    def __init__(self, path, line, msg):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


def _floats(tokens, path, lineno, count=None):
    if count is not None and len(tokens) != count:
        raise ParseError(path, lineno, f"expected {count} values, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"not a number in {' '.join(tokens)!r}") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(path, lineno, "non-finite coordinate")
    return vals


def read_xyz(path):
    """One ``x y z`` triple per line, no header. Blank lines are ignored."""
    pts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            pts.append(_floats(tokens, path, lineno, 3))
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def format_xyz(points):
    points = as_points(points)
    return "".join(f"{x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in points)


def write_xyz(path, points):
    with open(path, "w", newline="\n") as fh:
        fh.write(format_xyz(points))


def _content_lines(fh):
    for lineno, line in enumerate(fh, 1):
        text = line.split("#", 1)[0].strip()
        if text:
            yield lineno, text


def read_off(path):
    with open(path) as fh:
        lines = _content_lines(fh)
        try:
            lineno, head = next(lines)
        except StopIteration:
            raise ParseError(path, 1, "empty file") from None
        tokens = head.split()
        if tokens[0] != "OFF":
            raise ParseError(path, lineno, "missing OFF header")
        counts = tokens[1:]
        if not counts:
            try:
                lineno, text = next(lines)
            except StopIteration:
                raise ParseError(path, lineno, "missing counts line") from None
            counts = text.split()
        if len(counts) < 2:
            raise ParseError(path, lineno, "counts line needs vertex and face counts")
        try:
            nv, nf = int(counts[0]), int(counts[1])
        except ValueError:
            raise ParseError(path, lineno, "non-integer counts") from None

        verts = []
        for _ in range(nv):
            try:
                lineno, text = next(lines)
            except StopIteration:
                raise ParseError(path, lineno + 1, f"expected {nv} vertices, found {len(verts)}") from None
            verts.append(_floats(text.split()[:3], path, lineno, 3))

        faces = []
        for _ in range(nf):
            try:
                lineno, text = next(lines)
            except StopIteration:
                raise ParseError(path, lineno + 1, f"expected {nf} faces, found {len(faces)}") from None
            faces.append(_face(text.split(), path, lineno, nv))

        extra = next(lines, None)
        if extra is not None:
            raise ParseError(path, extra[0], f"unexpected content after {nf} faces")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def _face(tokens, path, lineno, nv):
    try:
        vals = [int(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, "face indices must be integers") from None
    if len(vals) != 4 or vals[0] != 3:
        raise ParseError(path, lineno, "only triangle faces ('3 i j k') are supported")
    if min(vals[1:]) < 0 or max(vals[1:]) >= nv:
        raise ParseError(path, lineno, "face index out of range")
    if vals[1] == vals[2] == vals[3]:
        raise ParseError(path, lineno, "degenerate face")
    return vals[1:]


def write_off(path, mesh):
    with open(path, "w", newline="\n") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for x, y, z in mesh.vertices:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")
        for i, j, k in mesh.faces:
            fh.write(f"3 {i} {j} {k}\n")


def read_ply_ascii(path):
    """ASCII PLY with float x/y/z vertex properties and optional triangle faces.

    Returns a :class:`TriangleMesh`; ``faces`` is empty for bare point sets.
    """
    with open(path) as fh:
        raw = list(enumerate(fh, 1))
    if not raw or raw[0][1].strip() != "ply":
        raise ParseError(path, 1, "missing 'ply' magic")
    elements = []
    pos = 1
    fmt_ok = False
    while True:
        if pos >= len(raw):
            raise ParseError(path, len(raw), "missing end_header")
        lineno, line = raw[pos]
        tokens = line.split()
        pos += 1
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "format":
            if tokens[1:2] != ["ascii"]:
                raise ParseError(path, lineno, "only ASCII PLY is supported")
            fmt_ok = True
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise ParseError(path, lineno, "property before element")
            elements[-1][2].append(tokens[-1])
        elif tokens[0] == "end_header":
            break
        else:
            raise ParseError(path, lineno, f"unknown header keyword {tokens[0]!r}")
    if not fmt_ok:
        raise ParseError(path, pos, "missing format line")

    body = [(n, l.split()) for n, l in raw[pos:] if l.strip()]
    cursor = 0
    verts, faces = [], []
    for name, count, props in elements:
        for _ in range(count):
            if cursor >= len(body):
                last = raw[-1][0] + 1
                raise ParseError(path, last, f"expected {count} {name} rows")
            lineno, tokens = body[cursor]
            cursor += 1
            if name == "vertex":
                if len(tokens) != len(props):
                    raise ParseError(path, lineno, f"expected {len(props)} vertex values")
                vals = dict(zip(props, tokens))
                try:
                    verts.append(_floats([vals["x"], vals["y"], vals["z"]], path, lineno, 3))
                except KeyError:
                    raise ParseError(path, lineno, "vertex needs x, y, z properties") from None
            elif name == "face":
                faces.append(_face(tokens, path, lineno, len(verts)))
    if cursor < len(body):
        raise ParseError(path, body[cursor][0], "unexpected data after declared elements")
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_mesh(path):
    path = str(path)
    if path.lower().endswith(".ply"):
        return read_ply_ascii(path)
    return read_off(path)

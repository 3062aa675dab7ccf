"""Serializers for reconstruction outputs: PLY, OBJ, CityGML 2.0, GeoJSON-ish.

Exact layouts are documented in docs/formats.md. Writers refuse structures
that violate their type invariants rather than emitting broken files.
"""

from __future__ import annotations

import struct
import xml.etree.ElementTree as ET

import numpy as np

from .reconstruct import CityModel, Mesh, PointCloud


def write_ply(pc: PointCloud, path, binary: bool = True) -> None:
    """Write a point cloud as PLY (binary little-endian or ASCII).

    Coordinates are float64 x/y/z; colors, when present, are uchar
    red/green/blue.
    """
    has_color = pc.colors is not None
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {len(pc)}")
    header += ["property double x", "property double y", "property double z"]
    if has_color:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append("end_header")
    if binary:
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for i in range(len(pc)):
                fh.write(struct.pack("<3d", *pc.points[i]))
                if has_color:
                    fh.write(struct.pack("<3B", *pc.colors[i]))
    else:
        with open(path, "w") as fh:
            fh.write("\n".join(header) + "\n")
            for i in range(len(pc)):
                coords = " ".join(repr(float(v)) for v in pc.points[i])
                if has_color:
                    coords += " " + " ".join(str(int(v)) for v in pc.colors[i])
                fh.write(coords + "\n")


def read_ply_header(path) -> dict:
    """Parse just the header of a PLY file (element counts and properties)."""
    info = {"elements": {}, "format": None}
    with open(path, "rb") as fh:
        current = None
        for raw in fh:
            line = raw.decode("ascii", errors="replace").strip()
            if line.startswith("format"):
                info["format"] = line.split()[1]
            elif line.startswith("element"):
                _, name, count = line.split()
                current = name
                info["elements"][name] = {"count": int(count), "properties": []}
            elif line.startswith("property") and current:
                info["elements"][current]["properties"].append(line.split()[1:])
            elif line == "end_header":
                break
    return info


def write_obj(mesh: Mesh, path) -> None:
    """Write a triangle mesh as Wavefront OBJ (v/f records, 1-based indices)."""
    with open(path, "w") as fh:
        fh.write(f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces\n")
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def read_obj(path) -> Mesh:
    """Minimal OBJ reader for v/f records (triangles only)."""
    vertices = []
    faces = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError("only triangle faces are supported")
                faces.append(idx)
    return Mesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
                np.asarray(faces, dtype=np.int64).reshape(-1, 3))


_NS = {
    "core": "http://www.opengis.net/citygml/2.0",
    "bldg": "http://www.opengis.net/citygml/building/2.0",
    "gml": "http://www.opengis.net/gml",
}


def _pos_list(parent, ring3d) -> None:
    poslist = ET.SubElement(parent, f"{{{_NS['gml']}}}posList")
    poslist.set("srsDimension", "3")
    closed = np.vstack([ring3d, ring3d[:1]])
    # shortest round-trip decimals: heights survive the file format exactly
    poslist.text = " ".join(repr(float(v)) for v in closed.ravel())


def _solid_polygon(surface, ring3d) -> None:
    member = ET.SubElement(surface, f"{{{_NS['gml']}}}surfaceMember")
    polygon = ET.SubElement(member, f"{{{_NS['gml']}}}Polygon")
    exterior = ET.SubElement(polygon, f"{{{_NS['gml']}}}exterior")
    ring = ET.SubElement(exterior, f"{{{_NS['gml']}}}LinearRing")
    _pos_list(ring, ring3d)


def write_citygml(model: CityModel, path, epsg: int | None = None) -> None:
    """Write LOD1 prisms as a CityGML 2.0 document.

    One bldg:Building per prism, each with an lod1Solid whose composite
    surface holds the bottom face, the top face, and one wall per footprint
    edge (6 polygons for a rectangular footprint). Exterior rings are
    counter-clockwise seen from outside the solid; srsName is set when an
    EPSG code is given.
    """
    for ns, uri in _NS.items():
        ET.register_namespace(ns, uri)
    root = ET.Element(f"{{{_NS['core']}}}CityModel")
    name = ET.SubElement(root, f"{{{_NS['gml']}}}name")
    name.text = "dsm3d LOD1 reconstruction"
    for b in model.buildings:
        member = ET.SubElement(root, f"{{{_NS['core']}}}cityObjectMember")
        bldg = ET.SubElement(member, f"{{{_NS['bldg']}}}Building")
        bldg.set(f"{{{_NS['gml']}}}id", f"building_{b.building_id}")
        height = ET.SubElement(bldg, f"{{{_NS['bldg']}}}measuredHeight")
        height.set("uom", "m")
        height.text = repr(float(b.height))
        lod1 = ET.SubElement(bldg, f"{{{_NS['bldg']}}}lod1Solid")
        solid = ET.SubElement(lod1, f"{{{_NS['gml']}}}Solid")
        if epsg is not None:
            solid.set("srsName", f"EPSG:{int(epsg)}")
        exterior = ET.SubElement(solid, f"{{{_NS['gml']}}}exterior")
        surface = ET.SubElement(exterior, f"{{{_NS['gml']}}}CompositeSurface")

        ring = b.footprint.ring
        n = len(ring)
        bottom = np.column_stack([ring[::-1], np.full(n, b.base)])
        top = np.column_stack([ring, np.full(n, b.top)])
        _solid_polygon(surface, bottom)
        _solid_polygon(surface, top)
        for i in range(n):
            a = ring[i]
            c = ring[(i + 1) % n]
            wall = np.array([
                [a[0], a[1], b.base],
                [c[0], c[1], b.base],
                [c[0], c[1], b.top],
                [a[0], a[1], b.top],
            ])
            _solid_polygon(surface, wall)
    tree = ET.ElementTree(root)
    ET.indent(tree, space="  ")
    tree.write(path, encoding="utf-8", xml_declaration=True)


def write_polygons_json(polys, path) -> None:
    """Dump footprint rings as a GeoJSON-style JSON file for inspection."""
    import json

    features = []
    for p in polys:
        closed = np.vstack([p.ring, p.ring[:1]])
        features.append({
            "type": "Feature",
            "properties": {"component_id": int(p.component_id),
                           "area": float(p.area)},
            "geometry": {"type": "Polygon",
                         "coordinates": [closed.tolist()]},
        })
    with open(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh,
                  indent=2, sort_keys=True)

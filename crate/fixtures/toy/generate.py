"""Regenerates the toy fixture: two scenes plus one overexposed scene.

Images are ray-cast from the object boxes so depth and color agree with the
geometry. Run from this directory: python3 generate.py
"""

import json
import math
import os

import numpy as np
from PIL import Image

W, H = 64, 48
K = {"fx": 40.0, "fy": 40.0, "cx": 31.5, "cy": 23.5}


def pose(rows, t):
    return [list(rows[i]) + [t[i]] for i in range(3)] + [[0.0, 0.0, 0.0, 1.0]]


# World-from-camera rotations (rows), camera x right, y down, z forward.
LOOK_PY = [[1, 0, 0], [0, 0, 1], [0, -1, 0]]
LOOK_PY_ROLLED = [[0, 1, 0], [0, 0, 1], [1, 0, 0]]
LOOK_NX = [[0, 0, -1], [1, 0, 0], [0, -1, 0]]
LOOK_NY = [[-1, 0, 0], [0, 0, -1], [0, -1, 0]]


def ray_box(o, d, box):
    cx, cy, cz = box["center"]
    l, w, h = box["size"]
    c, s = math.cos(box["yaw"]), math.sin(box["yaw"])
    # into box frame
    ox, oy, oz = o[0] - cx, o[1] - cy, o[2] - cz
    lo = np.array([c * ox + s * oy, -s * ox + c * oy, oz])
    ld = np.array([c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]])
    half = np.array([l, w, h]) / 2
    t0, t1 = -np.inf, np.inf
    for k in range(3):
        if abs(ld[k]) < 1e-12:
            if abs(lo[k]) > half[k]:
                return None
            continue
        a, b = (-half[k] - lo[k]) / ld[k], (half[k] - lo[k]) / ld[k]
        t0, t1 = max(t0, min(a, b)), min(t1, max(a, b))
    if t1 < max(t0, 0):
        return None
    return t0 if t0 > 0 else None


def render(objects, frame_pose, bright=False):
    r = np.array([row[:3] for row in frame_pose[:3]], dtype=float)
    t = np.array([row[3] for row in frame_pose[:3]], dtype=float)
    img = np.zeros((H, W), dtype=np.uint8)
    depth = np.zeros((H, W), dtype=np.uint16)
    for v in range(H):
        for u in range(W):
            dc = np.array([(u - K["cx"]) / K["fx"], (v - K["cy"]) / K["fy"], 1.0])
            dw = r @ dc
            best, shade = None, 60 + (v * 40) // H
            for i, o in enumerate(objects):
                hit = ray_box(t, dw, o["box"])
                if hit is not None and (best is None or hit < best):
                    best, shade = hit, 110 + (37 * i) % 120
            img[v, u] = 255 if bright else shade
            if best is not None:
                depth[v, u] = int(round(best * 1000))  # z-depth: ray has unit z
    return img, depth


def surface_points(box, n=6):
    cx, cy, cz = box["center"]
    l, w, h = box["size"]
    c, s = math.cos(box["yaw"]), math.sin(box["yaw"])
    pts = []
    g = [i / (n - 1) - 0.5 for i in range(n)]
    for a in g:
        for b in g:
            for face in range(6):
                axis, sign = face // 2, 1 if face % 2 else -1
                local = [0.0, 0.0, 0.0]
                others = [k for k in range(3) if k != axis]
                local[axis] = sign * 0.5
                local[others[0]], local[others[1]] = a, b
                x, y, z = local[0] * l, local[1] * w, local[2] * h
                pts.append((cx + c * x - s * y, cy + s * x + c * y, cz + z))
    return sorted(set((round(p[0], 6), round(p[1], 6), round(p[2], 6)) for p in pts))


def write_scene(scene_id, source, objects, frames, bright=False, video=False):
    os.makedirs(scene_id, exist_ok=True)
    manifest_objects = []
    for o in objects:
        rec = {"id": o["id"]}
        if "label" in o:
            rec["label"] = o["label"]
        if o.get("points"):
            path = f"{scene_id}/obj{o['id']}.xyz"
            with open(path, "w") as f:
                for p in surface_points(o["box"]):
                    f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}\n")
            rec["points"] = f"obj{o['id']}.xyz"
        else:
            rec["box"] = o["box"]
        for k in ("attributes", "caption"):
            if k in o:
                rec[k] = o[k]
        manifest_objects.append(rec)
    manifest_frames = []
    for fid, (rows, t, with_depth) in frames.items():
        p = pose(rows, t)
        img, depth = render(objects, p, bright)
        Image.fromarray(img, mode="L").save(f"{scene_id}/{fid}.png")
        rec = {"frame_id": fid, "pose": p, "intrinsics": K, "image": f"{fid}.png"}
        if with_depth:
            Image.fromarray(depth.astype(np.uint16)).save(f"{scene_id}/{fid}_depth.png")
            rec["depth"] = f"{fid}_depth.png"
        manifest_frames.append(rec)
    manifest = {
        "scene_id": scene_id,
        "source": source,
        "is_video": video,
        "objects": manifest_objects,
        "frames": manifest_frames,
    }
    with open(f"{scene_id}/manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def box(c, s, yaw=0.0):
    return {"center": list(c), "size": list(s), "yaw": yaw}


scene0 = [
    {"id": 1, "label": "table", "box": box((0, 0.5, 0.375), (1.2, 0.8, 0.75))},
    {"id": 2, "label": "cup", "box": box((0.2, 0.5, 0.8), (0.08, 0.08, 0.1))},
    {"id": 3, "label": "chairs", "points": True, "box": box((-0.9, 0.5, 0.45), (0.5, 0.5, 0.9)),
     "attributes": {"color": "red", "material": "wooden"}},
    {"id": 4, "label": "chair", "box": box((0.9, 0.5, 0.45), (0.45, 0.45, 0.9), 0.3),
     "attributes": {"color": "blue", "material": "wooden"}},
    {"id": 5, "label": "chair", "box": box((0.0, 1.6, 0.5), (0.6, 0.55, 1.0)),
     "attributes": {"color": "red", "material": "metal"}},
    {"id": 6, "label": "lamps", "box": box((1.8, 1.8, 0.8), (0.3, 0.3, 1.6)),
     "caption": "A tall floor lamp with a white shade."},
    {"id": 7, "label": "office chair", "box": box((-1.8, 1.5, 0.5), (0.6, 0.6, 1.0)),
     "attributes": {"color": "black", "material": "leather"}},
    {"id": 8, "box": box((-1.5, -0.5, 0.2), (0.4, 0.4, 0.4))},
]
frames0 = {
    "f000": (LOOK_PY, (0.0, -3.0, 1.2), True),
    "f001": (LOOK_PY_ROLLED, (0.0, -3.0, 1.2), False),
    "f002": (LOOK_NX, (4.0, 0.8, 1.2), True),
    "f003": (LOOK_NY, (0.0, 4.5, 1.2), False),
}

scene1 = [
    {"id": 1, "label": "bed", "box": box((0, 1, 0.25), (2.0, 1.6, 0.5))},
    {"id": 2, "label": "pillow", "box": box((-0.4, 1.6, 0.575), (0.5, 0.35, 0.15)),
     "attributes": {"color": "white", "shape": "square"}},
    {"id": 3, "label": "pillow", "box": box((0.4, 1.6, 0.575), (0.5, 0.35, 0.15)),
     "attributes": {"color": "blue", "shape": "square"}},
    {"id": 4, "label": "door", "box": box((2.2, -0.5, 1.0), (0.9, 0.05, 2.0)),
     "attributes": {"color": "brown", "material": "wooden"}},
    {"id": 5, "label": "tv", "box": box((-2.0, 0.0, 1.2), (1.0, 0.08, 0.6)),
     "attributes": {"color": "black", "shape": "flat"}},
    {"id": 6, "label": "night stand", "box": box((1.4, 1.8, 0.3), (0.45, 0.4, 0.6))},
]
frames1 = {
    "f000": (LOOK_PY, (0.0, -3.5, 1.4), True),
    "f001": (LOOK_NX, (4.5, 0.5, 1.4), True),
    "f002": (LOOK_NY, (0.0, 5.0, 1.4), False),
}

scene2 = [{"id": 1, "label": "sofa", "box": box((0, 1, 0.4), (2.0, 0.9, 0.8))}]
frames2 = {
    "f000": (LOOK_PY, (0.0, -3.0, 1.2), False),
    "f001": (LOOK_NX, (4.0, 1.0, 1.2), False),
}

if __name__ == "__main__":
    write_scene("scene0", "toy", scene0, frames0)
    write_scene("scene1", "toy", scene1, frames1)
    write_scene("scene2", "toy", scene2, frames2, bright=True)

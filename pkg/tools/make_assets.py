#!/usr/bin/env python3
"""Generate the bundled demo assets (point clouds and scene files)."""

import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from splatlight.geometry import GaussianSet
from splatlight.sceneio import write_gaussians

ASSETS = os.path.join(os.path.dirname(__file__), "..", "src", "splatlight", "assets")


def blob(gen, n, center, radius, albedo_range=(0.3, 0.9), opacity=(0.5, 1.0),
         sigma=(0.03, 0.09)):
    """Roughly spherical cloud of anisotropic Gaussians."""
    u = gen.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = radius * gen.uniform(0.0, 1.0, n) ** (1 / 3)
    centers = np.asarray(center) + u * r[:, None]
    q = gen.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianSet(
        center=centers,
        scale=gen.uniform(*sigma, (n, 3)),
        quat=q,
        opacity=gen.uniform(*opacity, n),
        albedo=gen.uniform(*albedo_range, (n, 3)),
        roughness=gen.uniform(0.4, 1.0, n),
        normal=u,
        emission=np.zeros((n, 3)),
    )


def make_micro():
    gen = np.random.default_rng(1234)
    cloud = blob(gen, 80, [0.0, 0.35, 0.0], 0.45, sigma=(0.04, 0.12))
    write_gaussians(os.path.join(ASSETS, "micro_cloud.ply"), cloud)

    scene = {
        "camera": {
            "position": [0.0, 0.7, -1.9],
            "look_at": [0.0, 0.25, 0.0],
            "up": [0.0, 1.0, 0.0],
            "fov_deg": 55.0,
            "resolution": [64, 64],
        },
        "gaussians": [
            {"id": "blob", "path": "micro_cloud.ply"},
        ],
        "meshes": [
            {
                "id": "floor",
                "vertices": [[-3, -0.2, -3], [3, -0.2, -3], [3, -0.2, 3], [-3, -0.2, 3]],
                "triangles": [[0, 1, 2], [0, 2, 3]],
                "albedo": [0.55, 0.55, 0.55],
                "roughness": 0.9,
            }
        ],
        "lights": [
            {"id": "sun", "type": "directional", "direction": [0.4, -1.0, 0.6],
             "radiance": [4.5, 4.3, 4.0]},
            {"id": "sky", "type": "environment", "color": [0.12, 0.14, 0.18]},
        ],
        "render": {"seed": 1, "frames": 2, "output_prefix": "out/micro"},
    }
    with open(os.path.join(ASSETS, "micro_scene.json"), "w") as f:
        json.dump(scene, f, indent=2)


def make_desk():
    gen = np.random.default_rng(777)
    parts = [
        blob(gen, 2600, [0.0, 0.5, 0.2], 0.55, sigma=(0.015, 0.05)),
        blob(gen, 1600, [-0.9, 0.35, -0.3], 0.4, sigma=(0.015, 0.05),
             albedo_range=(0.5, 0.95)),
        blob(gen, 800, [0.8, 0.3, -0.1], 0.3, sigma=(0.02, 0.06),
             albedo_range=(0.2, 0.6)),
    ]
    cloud = GaussianSet(
        center=np.concatenate([p.center for p in parts]),
        scale=np.concatenate([p.scale for p in parts]),
        quat=np.concatenate([p.quat for p in parts]),
        opacity=np.concatenate([p.opacity for p in parts]),
        albedo=np.concatenate([p.albedo for p in parts]),
        roughness=np.concatenate([p.roughness for p in parts]),
        normal=np.concatenate([p.normal for p in parts]),
        emission=np.concatenate([p.emission for p in parts]),
    )
    write_gaussians(os.path.join(ASSETS, "desk_cloud.ply"), cloud)

    scene = {
        "camera": {
            "position": [0.0, 0.9, -2.6],
            "look_at": [0.0, 0.35, 0.0],
            "up": [0.0, 1.0, 0.0],
            "fov_deg": 55.0,
            "resolution": [128, 128],
        },
        "gaussians": [
            {"id": "desk", "path": "desk_cloud.ply"},
        ],
        "meshes": [
            {
                "id": "table",
                "vertices": [[-4, -0.1, -4], [4, -0.1, -4], [4, -0.1, 4], [-4, -0.1, 4]],
                "triangles": [[0, 1, 2], [0, 2, 3]],
                "albedo": [0.5, 0.45, 0.4],
                "roughness": 0.7,
            }
        ],
        "lights": [
            {"id": "key", "type": "directional", "direction": [0.5, -1.0, 0.3],
             "radiance": [3.0, 2.9, 2.7]},
            {"id": "panel", "type": "area", "corner": [-1.5, 2.2, -1.0],
             "edge_u": [1.2, 0.0, 0.0], "edge_v": [0.0, 0.0, 1.2],
             "radiance": [6.0, 6.0, 6.5]},
            {"id": "sky", "type": "environment", "color": [0.15, 0.18, 0.22]},
        ],
        "render": {"seed": 1, "frames": 4, "output_prefix": "out/desk"},
    }
    with open(os.path.join(ASSETS, "desk_scene.json"), "w") as f:
        json.dump(scene, f, indent=2)


if __name__ == "__main__":
    os.makedirs(ASSETS, exist_ok=True)
    make_micro()
    make_desk()
    print("assets written to", os.path.abspath(ASSETS))

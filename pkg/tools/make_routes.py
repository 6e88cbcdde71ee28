"""Regenerate the five bundled sub-routes (about 151 km in total).

    python tools/make_routes.py

Output is deterministic; the JSON files under src/mgvsim/data/routes are
what the simulator actually reads.
"""
import json
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "mgvsim" / "data" / "routes"

# (id, name, surface, total km, segment length range m, grade mean, grade spread, start altitude m)
PLAN = [
    (1, "flat main road", "main_road", 35.0, (800, 2500), 0.0, 0.006, 120.0),
    (2, "flat off-road", "off_road", 28.0, (500, 1500), 0.0, 0.008, 140.0),
    (3, "prolonged incline", "incline", 25.0, (600, 1800), 0.028, 0.008, 90.0),
    (4, "prolonged decline", "decline", 25.0, (600, 1800), -0.028, 0.008, 860.0),
    (5, "hilly off-road", "hilly", 38.0, (300, 900), 0.0, 0.022, 300.0),
]


def build(route_id, name, surface, km, seg_range, g_mean, g_spread, alt0, seed=151):
    rng = np.random.default_rng(seed + route_id)
    total = km * 1000.0
    segs, pos, alt = [], 0.0, alt0
    while pos < total - 1.0:
        length = float(min(rng.uniform(*seg_range), total - pos))
        grade = g_mean + g_spread * rng.uniform(-1.0, 1.0)
        if surface == "hilly":
            # bias back toward the start altitude so the course stays inside the map
            grade += 0.3 * (alt0 - alt) / 1000.0
        grade = round(grade, 4)
        segs.append({"length": round(length, 1), "grade": grade, "surface": surface})
        pos += round(length, 1)
        alt += length * grade
    return {"id": route_id, "name": name, "start_altitude": alt0, "segments": segs}


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for row in PLAN:
        doc = build(*row)
        (OUT / f"route_{row[0]}.json").write_text(json.dumps(doc, indent=1) + "\n")
        print(row[0], row[1], sum(s["length"] for s in doc["segments"]) / 1000, "km")

"""Smoke test for the genreg extension module. Run after `maturin develop`."""
import json
import math
import os
import random
import tempfile

import genreg


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def main():
    assert abs(genreg.noisy_or(0.3, 0.4) - 0.58) < 1e-12
    prior = 0.01
    p = genreg.noisy_and(0.2, 0.3, prior)
    odds = (0.2 / 0.8) * (0.3 / 0.7) / (prior / (1 - prior))
    assert abs(p - odds / (1 + odds)) < 1e-12

    t = genreg.RigidTransform.from_axis_angle([0.0, 0.0, 1.0], 0.4, [0.1, -0.2, 0.3])
    src = [[random.uniform(-1, 1) for _ in range(3)] for _ in range(50)]
    fit = genreg.horn_fit(src, t.apply(src))
    assert genreg.rre(fit, t) < 1e-9 and genreg.rte(fit, t) < 1e-9
    back = t.compose(t.inverse())
    assert genreg.rre(back, genreg.RigidTransform()) < 1e-9

    src, tgt, gt, pairs = genreg.gen_scene(n_points=300, overlap=1.0, noise_sigma=0.0, seed=3)
    rng = random.Random(7)
    latent = [unit([rng.gauss(0, 1) for _ in range(32)]) for _ in src]
    out = genreg.register(src, tgt, src_geo=latent, tgt_geo=latent,
                          config=json.dumps({"fusion": "geo-only"}))
    assert out["n_matches"] == len(src)
    assert genreg.rre(out["transform"], gt) < 1e-6

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "f.fif")
        genreg.write_geo_features(path, latent[:5], "smoke")
        branch, k, rows = genreg.read_features(path)
        assert branch == "geo" and k is None and len(rows) == 5
        views = [latent[:4]] * 4
        genreg.write_img_features(path, views, 2)
        branch, k, data = genreg.read_features(path)
        assert branch == "img" and k == 2 and len(data) == 4

    cfg = json.loads(genreg.default_config())
    assert cfg["fusion"] == "and"

    bench_cfg = {"seeds": 1, "scene": {"n_points": 200}}
    summary = json.loads(genreg.run_benchmark(json.dumps(bench_cfg)))
    assert len(summary["methods"]) == 5
    print("smoke test passed")


if __name__ == "__main__":
    main()

"""Scratch spike: end-to-end benchmark behavior before harness exists."""
import sys
import time
import numpy as np

from hiermaml.tasks import SyntheticConfig, RegimeSpec, generate_synthetic, normalize
from hiermaml.metalearn import MetaConfig, train_origin_maml, evaluate_tasks, default_model
from hiermaml.hierarchy import HierarchyConfig, train_adaptive, evaluate_adaptive
from hiermaml.baselines import pooled_windows, train_supervised


def make_w(corr, f=19):
    rng = np.random.default_rng(1000)
    w0 = rng.standard_normal(f)
    w0 *= 3.0 / np.linalg.norm(w0)
    fresh = rng.standard_normal(f)
    fresh -= fresh @ w0 / (w0 @ w0) * w0
    fresh *= 3.0 / np.linalg.norm(fresh)
    w1 = corr * w0 + np.sqrt(1 - corr * corr) * fresh
    return tuple(w0), tuple(w1)


def benchmark_cfg(seed, offset, corr, jit_hard, jit_easy=0.25):
    w0, w1 = make_w(corr)  # fixed benchmark functions; seed varies draws
    return SyntheticConfig(
        grid=(10, 8), test_fraction=0.25, seed=seed,
        regimes=(
            RegimeSpec(fraction=0.75, nonlinearity="linear", noise_std=0.05,
                       offset=0.0, weights=w0),
            RegimeSpec(fraction=0.25, nonlinearity="linear", noise_std=0.05,
                       offset=offset, weights=w1, param_jitter=jit_hard),
        ),
        param_jitter=jit_easy,
    )


def pretrain(pre, seed, epochs=100):
    feats, labels = pooled_windows([(pre, "both")])
    n = feats.shape[0]
    n_train = int(0.8 * n)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    tr, te = order[:n_train], order[n_train:]
    model = default_model(pre.descriptor, seed=seed)
    model, _ = train_supervised(model, feats[tr], labels[tr], epochs, 0.001, seed=seed)
    preds = model.predict(model.flatten(), feats[te])
    ss_res = np.sum((labels[te] - preds) ** 2)
    ss_tot = np.sum((labels[te] - labels[te].mean()) ** 2)
    return model, 1 - ss_res / ss_tot


def run(seed, batch, offset, corr, jit_hard, ilr):
    t0 = time.time()
    cfg = benchmark_cfg(seed, offset, corr, jit_hard)
    train, test, pre = generate_synthetic(cfg)
    train, (test, pre), stats, _ = normalize(train, [test, pre])
    model, pre_r2 = pretrain(pre, seed)
    meta = MetaConfig(seed=seed, task_batch_size=batch, inner_lr=ilr)
    origin, log = train_origin_maml(train, meta, model=model)
    scores = evaluate_tasks(origin, list(test), meta.inner_lr, meta.adaptation_steps)
    hard_ids = {t.task_id for t in test if t.regime_id == 1}
    res = {"pre_r2": pre_r2}
    res["origin"] = (
        np.mean([s.r2 for s in scores if s.task_id in hard_ids]),
        np.mean([s.r2 for s in scores if s.task_id not in hard_ids]),
        np.mean([s.r2 for s in scores]),
    )
    # adaptation sanity: post-adaptation vs pre-adaptation query mse
    from hiermaml.net import mse_loss
    from hiermaml.metalearn import adapt
    improved = 0
    for t in test:
        pre_mse = mse_loss(origin.predict(origin.flatten(), t.query_features()), t.query.labels)
        a = adapt(origin, t.support, meta.inner_lr, meta.adaptation_steps)
        post_mse = mse_loss(origin.predict(a.params, t.query_features()), t.query.labels)
        improved += post_mse < pre_mse
    res["adapt_improved"] = improved / len(test)

    for variant, inner_epochs in (("B", 1), ("A", 3), ("A1", 1), ("A4", 4)):
        v = variant[0]
        hcfg = HierarchyConfig(variant=v, meta=MetaConfig(
            seed=seed, task_batch_size=batch, inner_epochs=inner_epochs, inner_lr=ilr))
        hier, hlog = train_adaptive(train, model, hcfg)
        recs = evaluate_adaptive(test, hier, hcfg)
        gam = {}
        for (e, l, g) in hier.threshold_log:
            gam.setdefault(e, {})[l] = g
        first, last = min(gam), max(gam)
        res[variant] = (
            np.mean([r.r2 for r in recs if r.task_id in hard_ids]),
            np.mean([r.r2 for r in recs if r.task_id not in hard_ids]),
            np.mean([r.r2 for r in recs]),
            gam[first].get(1), gam[last].get(1),
            tuple(gam[last].values()),
        )
    res["wall"] = time.time() - t0
    return res


def main():
    batch = int(sys.argv[1]) if len(sys.argv) > 1 else 8
    seeds = [int(s) for s in (sys.argv[2].split(",") if len(sys.argv) > 2 else ["1"])]
    offset = float(sys.argv[3]) if len(sys.argv) > 3 else -1.0
    corr = float(sys.argv[4]) if len(sys.argv) > 4 else 0.6
    jit_hard = float(sys.argv[5]) if len(sys.argv) > 5 else 0.2
    ilr = float(sys.argv[6]) if len(sys.argv) > 6 else 0.01
    print(f"== batch {batch} offset {offset} corr {corr} jit_hard {jit_hard} ilr {ilr}")
    for seed in seeds:
        r = run(seed, batch, offset, corr, jit_hard, ilr)
        print(f"seed {seed} batch {batch} pre_r2 {r['pre_r2']:.4f} "
              f"adapt_improved {r['adapt_improved']:.2f} wall {r['wall']:.0f}s")
        print(f"  origin   hard {r['origin'][0]:+.3f} easy {r['origin'][1]:+.3f} mean {r['origin'][2]:+.3f}")
        for k in ("B", "A", "A1", "A4"):
            hard, easy, mean, g1_first, g1_last, g_final = r[k]
            print(f"  adapt-{k:2s} hard {hard:+.3f} easy {easy:+.3f} mean {mean:+.3f} "
                  f"g1 {g1_first:+.3f}->{g1_last:+.3f} final-gammas {tuple(round(g,3) for g in g_final)}")
        sys.stdout.flush()


if __name__ == "__main__":
    main()

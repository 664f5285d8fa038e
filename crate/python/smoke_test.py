"""Smoke test for the `ccf` extension module.

Build it first, e.g. `maturin develop -m crates/py/Cargo.toml`, or
`cargo build -p ccf-py --release --features extension-module` and put
target/release/libccf.so on the path as ccf.so.

With CCF_DATA_DIR pointing at an ML-100k directory it also runs a very
small end-to-end experiment.
"""

import math
import os
import sys
import tempfile

import ccf

assert ccf.auc([0.2, 0.8, 0.4, 0.3], [0, 1, 1, 0]) == 1.0
assert abs(ccf.ctr_loss(0.5, 0.5, 1, 2.0) - 4 * math.log(2)) < 1e-12
assert abs(ccf.rela_impr(0.75, 0.7) - 25.0) < 1e-9
assert ccf.tokenize("Heat (1995)") == ["heat", "(", "1995", ")"]

cfg = ccf.Config()
assert cfg.backend == "mf" and cfg.variant == "ccf"
print("module ok:", ccf.__version__, cfg)

data = os.environ.get("CCF_DATA_DIR")
if not data:
    print("CCF_DATA_DIR unset; skipping the experiment")
    sys.exit(0)

out = tempfile.mkdtemp(prefix="ccf-smoke-")
cfg = ccf.Config(
    f"""
output_dir = "{out}"
[data]
dir = "{data}"
train_limit = 200
val_limit = 100
test_limit = 100
[cf]
max_epochs = 2
[lm]
d_model = 16
d_ff = 32
max_len = 200
[train]
max_epochs = 1
"""
)
exp = ccf.Experiment(cfg)
print(exp.stats())
report = exp.pretrain_cf()
print("cf best val auc", report["best_val_auc"])
exp.pretrain_lm()
tag, stages = exp.train("ccf")
print(tag, [s["best_val_auc"] for s in stages])
auc, n = exp.evaluate("ccf", "test")
print(f"test auc {auc:.4f} over {n}")
print(exp.rank(1, [1, 2, 3]))

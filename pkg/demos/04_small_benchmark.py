"""
Teacher, baseline student and distilled student on a small corpus
=================================================================

A shortened version of the acceptance benchmark: one LiDAR teacher, then a
pretrained radar student continued on labels only, with RespD alone, and
with every distillation term.  With the short schedule used here the
teacher is barely better than the student, and imitating it pulls the
student down: distillation only pays once the teacher clearly leads.  The
README lists the full-size three-seed numbers.
Pass ``--full`` for the default sizes (about ten minutes on one core).
"""

import sys
import time

from bevdistill.ablation import Experiment
from bevdistill.config import DistillConfig
from bevdistill.evaluate import evaluate
from bevdistill.scene import generate_corpus
from bevdistill.train import PreparedCorpus

full = "--full" in sys.argv
cfg = DistillConfig()
if not full:
    cfg = cfg.with_(**{"optim.teacher_steps": 150, "optim.student_steps": 100, "optim.distill_steps": 60})
n_train, n_eval = (cfg.corpus.n_train, cfg.corpus.n_eval) if full else (80, 30)


def corpus(first, n):
    scenes = generate_corpus(range(first, first + n), cfg.grid_spec, cfg.class_spec, cfg.n_obj_range, cfg.sensor)
    return PreparedCorpus.build(scenes, cfg)


t0 = time.time()
train, held_out = corpus(cfg.corpus.train_seed, n_train), corpus(cfg.corpus.eval_seed, n_eval)
exp = Experiment(cfg, train, held_out)
print(f"teacher mAP  {evaluate(exp.teacher, held_out, cfg).mAP:.3f}   ({time.time() - t0:.0f} s)")

no_kd = cfg.with_(**{f"toggles.{k}": False for k in ("respd", "csrd", "msfd", "reld")})
_, base = exp.run(no_kd, seed=0)
print(f"baseline     {base.mAP:.3f}   ({time.time() - t0:.0f} s)")
_, respd = exp.run(cfg.with_(**{f"toggles.{k}": False for k in ("csrd", "msfd", "reld")}), seed=0)
print(f"respd only   {respd.mAP:.3f}   ({time.time() - t0:.0f} s)")
_, kd = exp.run(cfg, seed=0)
print(f"distilled    {kd.mAP:.3f}   ({time.time() - t0:.0f} s)")
print("per-class AP (distilled):", {k: round(v, 3) for k, v in kd.ap.items()})

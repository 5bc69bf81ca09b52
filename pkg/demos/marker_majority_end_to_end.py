# %% [markdown]
# Three-stage training on the synthetic marker_majority task.
#
# Each 60-word example hides three marker words among filler; the label is
# the majority class of the markers. Most tokens are noise, so a learned
# schedule should be able to drop many of them. This is a smaller run than
# the acceptance test (fewer examples, one seed) and takes about a minute.

# %%
import tempfile
from pathlib import Path

from fcakit.analysis import (cls_distance, count_flops, pool_all_baseline, prune_baseline,
                             schedule_token_total)
from fcakit.data import TaskSpec, ingest_dataset, synthetic_task_generator, to_dataset
from fcakit.encoder import EncoderConfig, EncoderModel
from fcakit.fca import FcaConfig, FrozenEncoder
from fcakit.informativeness import dispersion_stats
from fcakit.pipeline import TrainConfig, run_pipeline

workdir = Path(tempfile.mkdtemp())
spec = TaskSpec(max_len=64)
synthetic_task_generator("marker_majority", 800, 1, workdir / "train.tsv")
synthetic_task_generator("marker_majority", 200, 2, workdir / "dev.tsv")
corpus = ingest_dataset(workdir / "train.tsv", spec, seed=0)
dev_corpus = ingest_dataset(workdir / "dev.tsv", spec, vocab=corpus.vocab, labels=corpus.labels)
train, dev = to_dataset(corpus.examples, 64), to_dataset(dev_corpus.examples, 64)

# %% train
cfg = EncoderConfig(num_layers=4, num_heads=4, d_hidden=64, d_ff=128,
                    vocab_size=len(corpus.vocab), max_len=64, num_classes=2)
tc = TrainConfig(lam=1e-2, seed=0)
result = run_pipeline(EncoderModel.init(cfg, seed=0), train, tc, FcaConfig("average", 2), dev=dev)
for rep in result.reports:
    print(f"stage {rep.stage}: dev accuracy {rep.metric:.3f}")

full_total = cfg.num_layers * (cfg.max_len - 1)
print("schedule:", result.schedule.k, "k'=", result.schedule.k_prime)
print(f"fine tokens {schedule_token_total(result.schedule)} / {full_total}")
print(f"FLOPs speedup {count_flops(cfg, result.schedule).speedup(count_flops(cfg)):.2f}x")

# %% baselines at the same per-layer lengths
pruned = prune_baseline(result.models[2], result.schedule, train, dev, tc)
pooled = pool_all_baseline(result.models[2], result.schedule, train, dev, tc)
print(f"fca {result.metric(3):.3f}  prune {pruned.metric:.3f}  pool-all {pooled.metric:.3f}")

# %% how far did the CLS state drift from the full-length model?
fca = FrozenEncoder(result.final_model, result.schedule)
print("CLS distance to stage-1 model:", round(cls_distance(result.models[1], fca, dev.ids), 3))

# %% informativeness dispersion per layer in the fine-tuned model
trace = FrozenEncoder(result.models[1]).trace(dev.ids[:64], collect=True)
for layer, var, std in dispersion_stats(trace.scores, trace.masks):
    print(f"layer {layer}: normalized std {std:.4f}")

# %% [markdown]
# FLOPs and token accounting for a BERT-base sized encoder.
#
# Nothing here trains a model. We count forward FLOPs per layer for the full
# encoder and for a reduced length schedule, then look at where the savings
# come from.

# %%
from fcakit.analysis import count_flops, schedule_token_total
from fcakit.encoder import EncoderConfig
from fcakit.fca import LengthSchedule

base = dict(num_layers=12, num_heads=12, d_hidden=768, d_ff=3072)

# %% full-length cost grows slightly faster than linearly (attention is quadratic)
for n in (64, 128, 256, 512):
    cfg = EncoderConfig(**base, max_len=n)
    print(f"n={n:4d}  {count_flops(cfg).total / 1e9:7.2f} GFLOPs")

# %% a learned-looking schedule at length 128, two coarse units per layer
cfg = EncoderConfig(**base, max_len=128)
schedule = LengthSchedule([85, 78, 73, 69, 61, 57, 54, 52, 46, 41, 35, 35], k_prime=2)
full, reduced = count_flops(cfg), count_flops(cfg, schedule)
print("fine tokens:", schedule_token_total(schedule), "of", 12 * 128)
print(f"speedup: {reduced.speedup(full):.2f}x")

# %% per-layer breakdown: the FFN sees the shortened sequence, attention the previous length
for (n_att, n_ffn), layer in zip(reduced.lengths, reduced.layers):
    share = layer["ffn"] / sum(layer.values())
    print(f"attn {n_att:3d}  ffn {n_ffn:3d}  ffn share {share:.2f}")

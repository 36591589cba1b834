#!/usr/bin/env python3
"""Print GPT-2-small parameter totals with dense MoE and MPOE feed-forward banks."""

import sys

from mpoe.analysis import model_scale_accounting


def main():
    n_experts = int(sys.argv[1]) if len(sys.argv) > 1 else 8
    acc = model_scale_accounting(n_experts=n_experts)

    print("=" * 60)
    print(f"GPT-2 small, {acc.n_layers} layers, d_model={acc.d_model}, d_ff={acc.d_ff}")
    print("=" * 60)
    print(f"Base model:           {acc.base_total:>14,}")
    print(f"FFN per layer:        {acc.ffn_per_layer:>14,}")
    print()
    print(
        f"+MoE ({acc.n_experts} experts added): {acc.moe_total:>14,}  "
        f"({acc.moe_total / 1e6:.1f}M)"
    )
    print(f"+MPOE (FFN replaced):  {acc.mpoe_total:>14,}  ({acc.mpoe_total / 1e6:.1f}M)")
    print(f"MPOE bank per layer:   {acc.mpoe_bank_per_layer:>14,}")
    print(f"gamma (central/aux):   {acc.gamma:>14.3f}")
    print("=" * 60)


if __name__ == "__main__":
    main()

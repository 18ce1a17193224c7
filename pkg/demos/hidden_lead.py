"""Rebuild a lead the encoder never saw.

Two models are pretrained on the same records: one with the cross-lead
attention stage and one without it. Each limb lead is then hidden in turn,
all other leads stay visible, and the reconstruction error on the hidden
lead is compared. The model without cross-lead attention can only guess a
lead-specific template.

Pass ``--epochs`` to trade runtime for quality; the default is short.
"""

import argparse
from dataclasses import replace

import numpy as np

from lamae.evaluate import masked_lead_mse
from lamae.model import ModelConfig
from lamae.synthgen import DipoleConfig, synth_dataset
from lamae.train import TrainConfig, pretrain

LIMB = ("I", "II", "III", "aVR", "aVL", "aVF")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--records", type=int, default=400)
    args = ap.parse_args()

    model = ModelConfig(d_model=32, n_layers_enc=2, n_layers_la=2, n_layers_dec=1, mlp_ratio=2)
    train, _ = synth_dataset(args.records, DipoleConfig(seed=11))
    held_out, _ = synth_dataset(16, DipoleConfig(seed=90_000, noise_std=0.0))

    errors = {}
    for name, cfg in (("lamae", model), ("baseline", replace(model, latent_attention_enabled=False))):
        ckpt = pretrain(TrainConfig(epochs=args.epochs, model=cfg), train)
        params = ckpt.tensors()
        errors[name] = [masked_lead_mse(params, cfg, held_out, lead=cfg.lead_names.index(l)) for l in LIMB]
        print(f"{name}: final train loss {ckpt.loss_history[-1]:.2f}")

    print(f"{'lead':5s} {'lamae':>9s} {'baseline':>9s}")
    for i, lead in enumerate(LIMB):
        print(f"{lead:5s} {errors['lamae'][i]:9.4f} {errors['baseline'][i]:9.4f}")
    a, b = np.mean(errors["lamae"]), np.mean(errors["baseline"])
    print(f"mean  {a:9.4f} {b:9.4f}   relative gain {1 - a / b:+.1%}")


if __name__ == "__main__":
    main()

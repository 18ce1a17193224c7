"""Small end-to-end run: synthesize, pretrain, probe.

Uses a narrow network so the whole script finishes in a few minutes on one
core. Run from the repository root::

    python demos/quickstart.py
"""

from lamae.evaluate import compute_embeddings, hash_split, train_linear_probe
from lamae.model import ModelConfig
from lamae.synthgen import LABEL_NAMES, DipoleConfig, label_matrix, synth_dataset
from lamae.train import TrainConfig, pretrain

SMALL = ModelConfig(d_model=16, n_heads_enc=2, n_layers_enc=1, d_decoder=8, n_heads_dec=2, n_layers_dec=1,
                    n_heads_la=2, n_layers_la=1, mlp_ratio=2)


def main():
    records, labels = synth_dataset(300, DipoleConfig(seed=7))
    Y = label_matrix(labels)
    print(f"{len(records)} records, {records[0].samples.shape[0]} leads x {records[0].samples.shape[1]} samples")
    print("label prevalence:", {n: round(float(p), 2) for n, p in zip(LABEL_NAMES, Y.mean(axis=0))})

    ckpt = pretrain(TrainConfig(epochs=4, batch_size=16, learning_rate=3e-3, model=SMALL), records)
    print("pretraining loss per epoch:", [round(x, 2) for x in ckpt.loss_history])

    # frozen CLS embeddings, then a logistic probe per label
    E = compute_embeddings(ckpt.tensors(), SMALL, records)
    result = train_linear_probe(E, Y, hash_split(len(records)), label_names=LABEL_NAMES)
    for name, value in result.per_label.items():
        print(f"  {name:10s} AUROC {value:.3f}")
    print(f"macro AUROC {result.macro:.3f}")


if __name__ == "__main__":
    main()

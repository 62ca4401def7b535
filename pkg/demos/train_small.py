"""Generate a small synthetic set, train the narrow model for a few epochs and report metrics.

Takes under a minute on one core.
"""
from gwanomaly import ModelConfig, SynthConfig, TrainConfig, build_model, evaluate, generate_synthetic, split, train

data, _ = generate_synthetic(SynthConfig(n_background=400, n_bbh=200, n_sglf=200, seed=3))
train_set, val_set, test_set = split(data)
model = build_model(ModelConfig.desk(16, seed=3))
ckpt, history = train(model, train_set, val_set, TrainConfig(max_epochs=15, batch_size=64, lr=1e-3, seed=3))
for rec in history.records:
    print(f"epoch {rec.epoch:2d}  train {rec.train_loss:.4f}  val {rec.val_loss:.4f}  val acc {rec.val_acc:.3f}")
report = evaluate(ckpt.to_model(), test_set)
print(f"best epoch {ckpt.epoch}; test AUC {report.auc:.4f}, TNR at TPR 0.9 {report.tnr_at_tpr90:.4f}")

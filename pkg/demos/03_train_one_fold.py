"""
Training the site classifier on one fold
========================================

Module B only sees metastatic slides and predicts one of four sites. We
train it on a small cohort with early stopping on the validation fold and
report test metrics.
"""
from histomet import GeneratorConfig, TrainConfig, synthesize_slides
from histomet.trainer import run_fold

slides = synthesize_slides(GeneratorConfig(feature_dim=16, bag_size=(32, 64)))
config = TrainConfig(max_epochs=15, patience=5, learning_rate=1e-3, prototype_count=8)

result = run_fold(slides, fold=0, config=config, module="b")
for entry in result.log:
    print(f"epoch {entry['epoch']:2d}  train {entry['train_loss']:.4f}  val {entry['val_loss']:.4f}  "
          f"val AUC {entry['val_auc']:.3f}")
print("best epoch:", result.best_epoch)
print("test:", result.test_metrics)

#!/usr/bin/env python3
"""
Streaming demo: print each epoch's loss components as training produces them.
"""

import sys
from dotenv import load_dotenv
from src.model import ModelConfig, SparseOccupancyModel
from src.syndata import SceneDataset, SceneRecipe
from src.train import TrainConfig, iter_training

# Load environment variables
load_dotenv()


def stream_training(epochs=5):
    """Train a small teacher and stream per-epoch records."""
    recipe = SceneRecipe()
    spec = recipe.spec
    config = ModelConfig.teacher(n_classes=recipe.n_classes, image_hw=recipe.image_hw,
                                 scene_min=tuple(spec.lower.tolist()), scene_max=tuple(spec.upper.tolist()))
    dataset = SceneDataset.generate(recipe, seeds=range(6))
    model = SparseOccupancyModel(config, seed=0)

    print(f"\nTraining on {len(dataset)} scenes for {epochs} epochs...\n")
    print(f"{'epoch':>5} {'l_task':>10} {'total':>10} {'iou':>8} {'miou':>8}")
    print("-" * 45)
    for record in iter_training(model, dataset, TrainConfig(epochs=epochs, lr=2e-3)):
        miou = "-" if record["miou"] is None else f"{record['miou']:.4f}"
        print(f"{record['epoch']:>5} {record['l_task']:>10.4f} {record['total']:>10.4f} "
              f"{record['iou']:>8.4f} {miou:>8}", flush=True)


if __name__ == "__main__":
    print("\n" + "="*80)
    print("DISCENE - STREAMING TRAINING DEMO")
    print("="*80)

    try:
        stream_training()
        print("\nStreaming demo completed successfully!")

    except KeyboardInterrupt:
        print("\n\nDemo interrupted by user.")
        sys.exit(0)
    except Exception as e:
        print(f"\n\nDemo failed with error: {str(e)}")
        sys.exit(1)

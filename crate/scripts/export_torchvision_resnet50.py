"""Write torchvision's ImageNet ResNet-50 weights as a safetensors state dict."""

import argparse

import torch
from safetensors.torch import save_file
from torchvision.models import ResNet50_Weights, resnet50


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="weights/resnet50.safetensors")
    args = parser.parse_args()
    model = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1).eval()
    state = {
        k: v.detach().to(torch.float32).contiguous()
        for k, v in model.state_dict().items()
        if not k.endswith("num_batches_tracked")
    }
    save_file(state, args.out)
    print(f"wrote {len(state)} tensors to {args.out}")


if __name__ == "__main__":
    main()

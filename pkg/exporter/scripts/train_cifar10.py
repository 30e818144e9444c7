"""Train a reference architecture on CIFAR-10 and save its state dict.

Separate tooling: the exporter itself never trains. The checkpoint this
writes feeds straight into lensexport-model.

    python3 train_cifar10.py vgg13 runs/vgg13.pt --epochs 60 --data data/
"""

import argparse
from pathlib import Path

import torch
from torch import nn
from torch.utils.data import DataLoader

from lensexport.archs import ARCHITECTURES, build


def loaders(root: str, batch_size: int):
    import torchvision
    import torchvision.transforms as T

    mean, std = ARCHITECTURES["vgg13"].normalization
    train_tf = T.Compose([
        T.RandomCrop(32, padding=4),
        T.RandomHorizontalFlip(),
        T.ToTensor(),
        T.Normalize(mean, std),
    ])
    test_tf = T.Compose([T.ToTensor(), T.Normalize(mean, std)])
    train = torchvision.datasets.CIFAR10(root, train=True, download=True,
                                         transform=train_tf)
    test = torchvision.datasets.CIFAR10(root, train=False, download=True,
                                        transform=test_tf)
    return (DataLoader(train, batch_size, shuffle=True, num_workers=2),
            DataLoader(test, 512, shuffle=False, num_workers=2))


def evaluate(model, loader, device) -> float:
    model.eval()
    hits = total = 0
    with torch.no_grad():
        for x, y in loader:
            pred = model(x.to(device)).argmax(dim=1).cpu()
            hits += int((pred == y).sum())
            total += len(y)
    return hits / total


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("arch", choices=sorted(ARCHITECTURES))
    ap.add_argument("out", type=Path)
    ap.add_argument("--data", default="data")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    torch.manual_seed(args.seed)
    device = "cuda" if torch.cuda.is_available() else "cpu"
    model = build(args.arch, class_count=10).to(device)
    train_loader, test_loader = loaders(args.data, args.batch_size)

    opt = torch.optim.SGD(model.parameters(), lr=args.lr, momentum=0.9,
                          weight_decay=5e-4, nesterov=True)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=args.epochs)
    loss_fn = nn.CrossEntropyLoss()

    for epoch in range(args.epochs):
        model.train()
        running = 0.0
        for x, y in train_loader:
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(x.to(device)), y.to(device))
            loss.backward()
            opt.step()
            running += float(loss)
        sched.step()
        acc = evaluate(model, test_loader, device)
        print(f"epoch {epoch + 1:3d}  loss {running / len(train_loader):.4f}  "
              f"test acc {acc:.4f}")

    args.out.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), args.out)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()

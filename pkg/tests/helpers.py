"""Shared fixture generators for the tests."""
import numpy as np


def random_weighted_tree(rng, n, lo=0.2, hi=2.0):
    pairs = [(int(rng.integers(0, i)), i) for i in range(1, n)]
    return pairs, rng.uniform(lo, hi, size=len(pairs))


def path_distances(n, pairs, weights):
    adj = [[] for _ in range(n)]
    for (a, b), w in zip(pairs, weights):
        adj[a].append((b, w))
        adj[b].append((a, w))
    d = np.zeros((n, n))
    for s in range(n):
        stack, seen = [s], {s}
        while stack:
            u = stack.pop()
            for v, w in adj[u]:
                if v not in seen:
                    seen.add(v)
                    d[s, v] = d[s, u] + w
                    stack.append(v)
    return d


def additive_instance(rng, n, hide=0.5):
    """Exact path distances over the observed nodes of a random weighted tree.

    Internal nodes of degree >= 3 are hidden with probability ``hide``.
    Returns (observed distances, pairs, observed node ids).
    """
    pairs, w = random_weighted_tree(rng, n)
    deg = np.zeros(n, dtype=int)
    for a, b in pairs:
        deg[a] += 1
        deg[b] += 1
    hidden = [i for i in range(n) if deg[i] >= 3 and rng.random() < hide]
    observed = [i for i in range(n) if i not in hidden]
    d = path_distances(n, pairs, w)
    return d[np.ix_(observed, observed)], pairs, observed


def gaussian_tree_samples(rng, n, pairs, num_samples, root=0):
    """Samples of a Gaussian Markov tree: child = rho * parent + noise, unit variances."""
    adj = [[] for _ in range(n)]
    for a, b in pairs:
        adj[a].append(b)
        adj[b].append(a)
    rho = {frozenset(p): rng.uniform(0.6, 0.9) for p in pairs}
    x = np.zeros((num_samples, n))
    x[:, root] = rng.normal(size=num_samples)
    stack, seen = [root], {root}
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                r = rho[frozenset((u, v))]
                x[:, v] = r * x[:, u] + np.sqrt(1 - r * r) * rng.normal(size=num_samples)
                stack.append(v)
    return x


def bar_patch(rng, angle, size=24):
    """Grayscale patch with a bright bar through the centre at ``angle``."""
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2
    dist = np.abs(-np.sin(angle) * xx + np.cos(angle) * yy)
    img = np.where(dist < 2.0, 0.9, 0.15)
    return np.clip(img + rng.normal(scale=0.05, size=img.shape), 0, 1)


def bar_features(rng, angles, per_class, jitter=0.1):
    """HOG features of bar patches, ``per_class`` per angle, with true labels."""
    from treepose.training import patch_features

    patches, truth = [], []
    for k, a in enumerate(angles):
        for _ in range(per_class):
            patches.append(bar_patch(rng, a + rng.uniform(-jitter, jitter)))
            truth.append(k)
    return patch_features(patches), np.array(truth)


def single_level(data):
    from treepose.features import FeaturePyramid, HogMap

    return FeaturePyramid([HogMap(np.asarray(data, dtype=np.float64), 4)], 2.0, (1.0,))


def one_part_model():
    from treepose.model import ModelParameters, PartKind, PartSpec, TreeStructure

    parts = [PartSpec(0, "p0", PartKind.SINGLE, (), 1)]
    tree = TreeStructure(1, (), 0)
    return parts, tree, ModelParameters.zeros(parts, tree, [[(1, 1)]])


def two_part_chain(offset=(3, 0)):
    from treepose.model import ModelParameters, PartKind, PartSpec, TreeStructure

    parts = [PartSpec(0, "a", PartKind.SINGLE, (), 1), PartSpec(1, "b", PartKind.SINGLE, (), 1)]
    tree = TreeStructure(2, ((0, 1),), 0)
    model = ModelParameters.zeros(parts, tree, [[(2, 2)], [(2, 2)]])
    model.anchors[0][0, 0] = offset
    return parts, tree, model


def noise_maps(rng, count, shape=(10, 12), channels=slice(10, 31)):
    out = []
    for _ in range(count):
        d = np.zeros(shape + (31,))
        d[..., channels] = rng.uniform(0, 0.3, shape + (d[..., channels].shape[-1],))
        out.append(single_level(d))
    return out


def planted_set(rng, num_pos=4, num_neg=6):
    """Positives carry patterns in channels 0-7; negatives only 10-30."""
    from treepose.model import PartHypothesis, PoseHypothesis
    from treepose.structsvm import TrainingExample

    parts, tree, template = two_part_chain()
    examples = []
    for k in range(num_pos):
        d = np.zeros((10, 14, 31))
        x0, y0 = 3 + k % 3, 3 + k % 4
        d[y0 - 1:y0 + 1, x0 - 1:x0 + 1, 0:4] = rng.uniform(0.4, 0.6, (2, 2, 4))
        d[y0 - 1:y0 + 1, x0 + 2:x0 + 4, 4:8] = rng.uniform(0.4, 0.6, (2, 2, 4))
        pose = PoseHypothesis((PartHypothesis(0, x0, y0, 0, 0), PartHypothesis(1, x0 + 3, y0, 0, 0)))
        examples.append(TrainingExample(1, pyramid=single_level(d), pose=pose, image_id=f"pos{k}"))
    for k, pyr in enumerate(noise_maps(rng, num_neg, (10, 14))):
        examples.append(TrainingExample(-1, pyramid=pyr, image_id=f"neg{k}"))
    return examples, parts, tree, template

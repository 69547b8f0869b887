import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradient_error, random_image
from mvstyle import imaging
from mvstyle.losses import (
    LossWeights,
    color_alignment_loss,
    combine,
    content_loss,
    recompute_total,
    smooth_l1,
    structure_loss,
    style_loss,
    total_loss,
)
from mvstyle.perceptual import ToyExtractor


@pytest.fixture(scope="module")
def ex():
    return ToyExtractor().double()


@pytest.fixture(scope="module")
def pointwise():
    return ToyExtractor(kernel_size=1, stride=1).double()


def _shuffle(img, seed=0):
    h, w, c = img.shape
    perm = torch.randperm(h * w, generator=torch.Generator().manual_seed(seed))
    return img.reshape(h * w, c)[perm].reshape(h, w, c)


class TestSmoothL1:
    @pytest.mark.parametrize("x,expected", [(0.5, 0.125), (2.0, 1.5), (1.0, 0.5), (-2.0, 1.5), (0.0, 0.0)])
    def test_values(self, x, expected):
        a = torch.full((3, 4), x, dtype=torch.float64)
        assert smooth_l1(a, torch.zeros_like(a)).item() == pytest.approx(expected, abs=1e-15)

    def test_mean_reduction(self):
        a = torch.tensor([0.5, 2.0], dtype=torch.float64)
        assert smooth_l1(a, torch.zeros(2, dtype=torch.float64)).item() == pytest.approx((0.125 + 1.5) / 2)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            smooth_l1(torch.zeros(3), torch.zeros(4))


class TestContent:
    def test_identity(self, ex):
        img = random_image(0)
        assert content_loss(img, img, ex).item() == 0.0

    def test_symmetric(self, ex):
        a, b = random_image(0), random_image(1)
        assert content_loss(a, b, ex).item() == pytest.approx(content_loss(b, a, ex).item(), rel=1e-12)

    def test_positive(self, ex):
        assert content_loss(random_image(0), random_image(1), ex).item() > 0

    def test_gradient(self, ex):
        target = random_image(2)
        assert gradient_error(lambda x: content_loss(x, target, ex), random_image(3)) < 1e-3


class TestStyle:
    def test_identity(self, ex):
        img = random_image(4)
        assert style_loss(img, img, ex).item() == 0.0

    def test_shuffle_invariant_pointwise(self, pointwise):
        s = random_image(5)
        assert style_loss(_shuffle(s), s, pointwise).item() < 1e-20

    def test_size_agnostic_target(self, ex):
        assert style_loss(random_image(6, 16), random_image(7, 32), ex).item() > 0

    def test_matches_explicit_formula(self, ex):
        a, b = random_image(8), random_image(9)
        expected = 0.0
        for fa, fb in zip(ex(a), ex(b)):
            xa, xb = fa.data[0].flatten(1), fb.data[0].flatten(1)
            n = xa.numel()
            expected += float(((xa @ xa.T - xb @ xb.T) ** 2).sum()) / n**2
        assert style_loss(a, b, ex).item() == pytest.approx(expected, rel=1e-10)

    def test_gradient(self, ex):
        target = random_image(10)
        assert gradient_error(lambda x: style_loss(x, target, ex), random_image(11)) < 1e-3


class TestStructure:
    def test_identity(self):
        img = random_image(12)
        assert structure_loss(img, img).item() == 0.0

    def test_constant_offset(self):
        img = random_image(13, low=0.1, high=0.8)
        shifted = img + 0.1
        assert smooth_l1(imaging.sobel(shifted), imaging.sobel(img)).item() < 1e-20
        assert smooth_l1(imaging.laplacian(shifted), imaging.laplacian(img)).item() < 1e-20
        canny = smooth_l1(imaging.soft_canny(shifted), imaging.soft_canny(img)).item()
        assert structure_loss(shifted, img).item() == pytest.approx(canny, abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            structure_loss(random_image(0, 8), random_image(0, 9))

    def test_gradient(self):
        target = random_image(14)
        assert gradient_error(lambda x: structure_loss(x, target), random_image(15)) < 1e-3


class TestColorAlignment:
    def test_identity(self):
        img = random_image(16)
        assert color_alignment_loss(img, img).item() == 0.0

    def test_shuffle(self):
        img = random_image(17)
        assert color_alignment_loss(_shuffle(img), img).item() < 1e-7

    def test_red_vs_blue(self):
        # Chroma of (0.9, 0.1, 0.1) is log 9 = 2.2, inside the [-3, 3] domain.
        red = torch.tensor([0.9, 0.1, 0.1], dtype=torch.float64).expand(8, 8, 3)
        blue = red.flip(-1)
        assert color_alignment_loss(red, blue).item() > 0.99

    def test_gradient_near_black_converges(self):
        # Dark pixels sharpen the kernel in chroma space; the difference quotient
        # converges quadratically to the analytic gradient.
        target, x = random_image(20, low=0.05, high=0.95), random_image(21, low=0.05, high=0.95)
        e4 = gradient_error(lambda z: color_alignment_loss(z, target), x, step=1e-4)
        e5 = gradient_error(lambda z: color_alignment_loss(z, target), x, step=1e-5)
        assert e5 < 1e-4
        assert e4 / e5 == pytest.approx(100, rel=0.1)

    def test_range(self):
        v = color_alignment_loss(random_image(18), random_image(19)).item()
        assert 0 < v <= 1

    def test_gradient(self):
        target = random_image(20)
        assert gradient_error(lambda x: color_alignment_loss(x, target), random_image(21)) < 1e-3


class TestTotal:
    def test_unit_components(self):
        one = torch.tensor(1.0)
        br = combine(one, one, one, one, LossWeights())
        assert br.total.item() == 100_031_000.0

    def test_all_identity(self, ex):
        img = random_image(22)
        br = total_loss(img, img, img, LossWeights(), ex)
        assert br.total.item() == 0.0

    def test_zero_weights(self, ex):
        br = total_loss(random_image(23), random_image(24), random_image(25), LossWeights(0, 0, 0, 0), ex)
        assert br.total.item() == 0.0

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(content=-1.0)

    def test_record_recomputes_exactly(self, ex):
        br = total_loss(random_image(26).float(), random_image(27).float(), random_image(28).float(),
                        LossWeights(), ToyExtractor())
        rec = br.record(step=3)
        assert rec["step"] == 3
        assert recompute_total(rec, LossWeights()) == rec["total"]

    def test_gradient(self, ex):
        c, s = random_image(29), random_image(30)
        w = LossWeights()
        assert gradient_error(lambda x: total_loss(x, c, s, w, ex).total, random_image(31)) < 1e-3

    def test_batch_mean(self, ex):
        a, b, s = random_image(32), random_image(33), random_image(34)
        c1, c2 = random_image(35), random_image(36)
        w = LossWeights()
        batch = total_loss(torch.stack([a, b]), torch.stack([c1, c2]), s, w, ex).total.item()
        single = (total_loss(a, c1, s, w, ex).total.item() + total_loss(b, c2, s, w, ex).total.item()) / 2
        assert batch == pytest.approx(single, rel=1e-9)


_w = st.floats(0, 1e4, allow_nan=False)


@settings(max_examples=25, deadline=None)
@given(st.tuples(_w, _w, _w, _w), st.tuples(_w, _w, _w, _w), st.floats(0, 10))
def test_total_linear_in_weights(w1, w2, k):
    parts = [torch.tensor(v, dtype=torch.float64) for v in (0.3, 2e-5, 0.07, 0.4)]
    t1 = combine(*parts, LossWeights(*w1)).total.item()
    t2 = combine(*parts, LossWeights(*w2)).total.item()
    mixed = combine(*parts, LossWeights(*[a + k * b for a, b in zip(w1, w2)])).total.item()
    assert mixed == pytest.approx(t1 + k * t2, rel=1e-9, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000))
def test_losses_nonnegative(sa, sb):
    a, b = random_image(sa, 8), random_image(sb, 8)
    ex = ToyExtractor().double()
    for v in (content_loss(a, b, ex), style_loss(a, b, ex), structure_loss(a, b), color_alignment_loss(a, b)):
        assert v.item() >= 0

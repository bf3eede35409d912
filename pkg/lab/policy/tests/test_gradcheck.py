import torch
from django.test import SimpleTestCase, tag

from policy.gradcheck import CoordinateCheck, grad_check
from policy.scheduler import make_noise_schedule
from policy.training import diffusion_loss, discrete_loss

from .factories import tiny_batch, tiny_policy


def _model_loss(kind):
    model = tiny_policy(kind).double()
    batch = tiny_batch(model.config, dtype=torch.float64)
    if not model.is_diffusion:
        return model, lambda: discrete_loss(model, batch)
    schedule = make_noise_schedule(model.config.T_train)
    g = torch.Generator().manual_seed(1)
    t = torch.randint(0, schedule.T_train, (len(batch),), generator=g)
    eps = torch.randn(batch.actions.shape, generator=g, dtype=torch.float64)
    return model, lambda: diffusion_loss(model, schedule, batch, t=t, eps=eps)


class GradCheckTests(SimpleTestCase):
    def test_analytic_function(self):
        w = torch.nn.Parameter(torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))
        report = grad_check({"w": w}, lambda: (w ** 3).sum(), eps_fd=1e-5, n_coords=10)
        self.assertEqual(len(report), 10)
        self.assertLess(report.max_rel_error, 1e-6)

    def test_detects_a_wrong_gradient(self):
        w = torch.nn.Parameter(torch.tensor([1.0, 2.0], dtype=torch.float64))
        # Detaching one factor halves the analytic gradient of w^2.
        report = grad_check({"w": w}, lambda: (w * w.detach()).sum(), eps_fd=1e-5, n_coords=4)
        self.assertGreater(report.max_rel_error, 0.4)
        self.assertIn("w", report.summary())

    def test_no_trainable_parameters(self):
        w = torch.ones(2, dtype=torch.float64)
        report = grad_check({"w": w}, lambda: w.sum())
        self.assertEqual(len(report), 0)
        self.assertEqual(report.summary(), "no parameters checked")

    def test_relative_error_floor(self):
        check = CoordinateCheck("w", (0,), analytic=1e-6, numeric=2e-6)
        self.assertAlmostEqual(check.rel_error, 1e-6 / 1e-2)

    def test_incontext_policy_gradients(self):
        model, loss_fn = _model_loss("incontext")
        report = grad_check(dict(model.named_parameters()), loss_fn, eps_fd=1e-5, n_coords=80)
        self.assertLess(report.max_rel_error, 1e-4, report.summary())
        self.assertIn("backbone", report.per_group)
        self.assertIn("image_encoder", report.per_group)


@tag("slow")
class HeadGradCheckTests(SimpleTestCase):
    def test_every_head(self):
        for kind in ("incontext", "mlp_diffusion", "mlp_flat", "discrete"):
            with self.subTest(kind=kind):
                model, loss_fn = _model_loss(kind)
                report = grad_check(dict(model.named_parameters()), loss_fn, eps_fd=1e-5, n_coords=300)
                self.assertLess(report.max_rel_error, 1e-4, report.summary())

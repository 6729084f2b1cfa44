from django.db import models
from django.utils import timezone


class AssessmentRun(models.Model):
    METHOD_CHOICES = [('gpe', 'Gaussian process emulator'), ('mc', 'Direct Monte Carlo')]

    scenario = models.CharField(max_length=100, db_index=True)
    method = models.CharField(max_length=8, choices=METHOD_CHOICES)
    kernel = models.CharField(max_length=20, blank=True)
    basis = models.CharField(max_length=20, blank=True)
    n_train = models.PositiveIntegerField(default=0)
    n_mc = models.PositiveIntegerField()
    seed = models.PositiveIntegerField()
    mean_mw = models.FloatField()
    std_mw = models.FloatField()
    q05_mw = models.FloatField()
    q50_mw = models.FloatField()
    q95_mw = models.FloatField()
    timing = models.JSONField(default=dict)
    exclusion_rate = models.FloatField(default=0.0)
    sample_digest = models.CharField(max_length=64)
    config_digest = models.CharField(max_length=64, blank=True)
    output_dir = models.CharField(max_length=1024, blank=True)
    created_at = models.DateTimeField(default=timezone.now)

    class Meta:
        ordering = ['-created_at']

    def __str__(self):
        return f"{self.scenario} [{self.method}] mean={self.mean_mw:.3f} MW"

    def as_dict(self) -> dict:
        return {
            'id': self.pk,
            'scenario': self.scenario,
            'method': self.method,
            'kernel': self.kernel,
            'basis': self.basis,
            'n_train': self.n_train,
            'n_mc': self.n_mc,
            'seed': self.seed,
            'stats': {
                'mean': self.mean_mw,
                'std': self.std_mw,
                'q05': self.q05_mw,
                'q50': self.q50_mw,
                'q95': self.q95_mw,
            },
            'timing': self.timing,
            'exclusion_rate': self.exclusion_rate,
            'sample_digest': self.sample_digest,
            'config_digest': self.config_digest,
            'output_dir': self.output_dir,
            'created_at': self.created_at.isoformat(),
        }

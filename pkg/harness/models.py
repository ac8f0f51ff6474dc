import uuid

from django.db import models


class ExperimentRun(models.Model):
    """
    One `run` invocation: what was run, with which seed and code, and the
    steady-state summary. The CSV files in `output_dir` hold the full results.
    """

    id = models.BigAutoField(primary_key=True)
    run_uuid = models.UUIDField(default=uuid.uuid4, editable=False, unique=True, db_index=True)

    scenario_name = models.CharField(max_length=128, db_index=True)
    seed = models.BigIntegerField()
    config = models.JSONField()
    filters = models.JSONField()
    code_version = models.CharField(max_length=32)

    steady_state_rmse = models.JSONField(blank=True, null=True)
    diverged = models.JSONField(blank=True, null=True)
    diagnostics = models.JSONField(blank=True, null=True)

    output_dir = models.CharField(max_length=512, blank=True, null=True)
    process_duration_ms = models.IntegerField(blank=True, null=True)

    created_at = models.DateTimeField(auto_now_add=True, db_index=True)

    class Meta:
        ordering = ["-created_at"]

    def __str__(self):
        return f"{self.scenario_name} (seed {self.seed}) {self.run_uuid}"

    @classmethod
    def record(cls, config_echo, filters, metrics, code_version, output_dir=None, duration_ms=None):
        """Stores a finished run; NaN RMSE values (all trials diverged) are stored as null."""
        steady = {
            name: (None if m.steady_state_rmse != m.steady_state_rmse else m.steady_state_rmse)
            for name, m in metrics.items()
        }
        return cls.objects.create(
            scenario_name=config_echo["name"],
            seed=config_echo["seed"],
            config=config_echo,
            filters=list(filters),
            code_version=code_version,
            steady_state_rmse=steady,
            diverged={name: m.diverged for name, m in metrics.items()},
            diagnostics={name: m.diagnostics for name, m in metrics.items()},
            output_dir=str(output_dir) if output_dir else None,
            process_duration_ms=duration_ms,
        )

import uuid

from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(primary_key=True, serialize=False)),
                ('run_uuid', models.UUIDField(db_index=True, default=uuid.uuid4, editable=False, unique=True)),
                ('scenario_name', models.CharField(db_index=True, max_length=128)),
                ('seed', models.BigIntegerField()),
                ('config', models.JSONField()),
                ('filters', models.JSONField()),
                ('code_version', models.CharField(max_length=32)),
                ('steady_state_rmse', models.JSONField(blank=True, null=True)),
                ('diverged', models.JSONField(blank=True, null=True)),
                ('diagnostics', models.JSONField(blank=True, null=True)),
                ('output_dir', models.CharField(blank=True, max_length=512, null=True)),
                ('process_duration_ms', models.IntegerField(blank=True, null=True)),
                ('created_at', models.DateTimeField(auto_now_add=True, db_index=True)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]

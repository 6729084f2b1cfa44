# Generated by Django 5.2.5 on 2026-10-17 09:12

import django.utils.timezone
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='AssessmentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('scenario', models.CharField(db_index=True, max_length=100)),
                ('method', models.CharField(choices=[('gpe', 'Gaussian process emulator'), ('mc', 'Direct Monte Carlo')], max_length=8)),
                ('kernel', models.CharField(blank=True, max_length=20)),
                ('basis', models.CharField(blank=True, max_length=20)),
                ('n_train', models.PositiveIntegerField(default=0)),
                ('n_mc', models.PositiveIntegerField()),
                ('seed', models.PositiveIntegerField()),
                ('mean_mw', models.FloatField()),
                ('std_mw', models.FloatField()),
                ('q05_mw', models.FloatField()),
                ('q50_mw', models.FloatField()),
                ('q95_mw', models.FloatField()),
                ('timing', models.JSONField(default=dict)),
                ('exclusion_rate', models.FloatField(default=0.0)),
                ('sample_digest', models.CharField(max_length=64)),
                ('config_digest', models.CharField(blank=True, max_length=64)),
                ('output_dir', models.CharField(blank=True, max_length=1024)),
                ('created_at', models.DateTimeField(default=django.utils.timezone.now)),
            ],
            options={
                'ordering': ['-created_at'],
            },
        ),
    ]

from django.contrib import admin
from .models import AssessmentRun

@admin.register(AssessmentRun)
class AssessmentRunAdmin(admin.ModelAdmin):
    list_display = ('scenario', 'method', 'kernel', 'n_mc', 'mean_mw', 'std_mw', 'created_at')
    list_filter = ('method', 'kernel')
    search_fields = ('scenario', 'sample_digest', 'config_digest')

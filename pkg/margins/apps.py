from django.apps import AppConfig
class MarginsConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'margins'
    verbose_name = 'Load margin assessment'

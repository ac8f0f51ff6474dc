from django.apps import AppConfig


class SrukfConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'srukf'

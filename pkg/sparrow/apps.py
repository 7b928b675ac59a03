from django.apps import AppConfig


class SparrowConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'sparrow'
    verbose_name = 'Sparrow speculative decoding'

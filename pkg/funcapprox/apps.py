from django.apps import AppConfig


class FuncapproxConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'funcapprox'

from django.apps import AppConfig


class TabularOmdConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'tabular_omd'

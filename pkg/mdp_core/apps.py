from django.apps import AppConfig


class MdpCoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'mdp_core'

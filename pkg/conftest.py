import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'OMDLab.settings')
django.setup()

from __future__ import absolute_import, unicode_literals
import os
from celery import Celery

# Set the default Django settings module for the 'celery' program.
os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'OMDLab.settings')

# Create a Celery app instance.
app = Celery('OMDLab')

# Load the Django settings into the Celery app.
app.config_from_object('django.conf:settings', namespace='CELERY')

# Automatically discover tasks in all registered Django app configs.
app.autodiscover_tasks()

"""Configura Django antes de que pytest recoja las pruebas de sparrow/tests."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'sparrowproject.settings')
django.setup()

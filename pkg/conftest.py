"""Configure Django before pytest collects the dice test modules."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'agentdice.settings')
django.setup()

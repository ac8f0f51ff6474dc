from django.conf import settings
from django.test.runner import DiscoverRunner


class TrackingTestRunner(DiscoverRunner):
    """
    Discover runner that leaves out desk-scale acceptance runs
    unless RUN_ACCEPTANCE is set (or the tag is requested explicitly).
    """

    def __init__(self, *args, tags=None, exclude_tags=None, **kwargs):
        exclude_tags = set(exclude_tags or ())
        if not settings.RUN_ACCEPTANCE and 'acceptance' not in (tags or ()):
            exclude_tags.add('acceptance')
        super().__init__(*args, tags=tags, exclude_tags=exclude_tags, **kwargs)

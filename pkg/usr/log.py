import sys

from constantly import NamedConstant
from zope.interface import provider
from twisted.logger import ILogObserver, formatEvent, LogEvent, LogLevel, globalLogBeginner, globalLogPublisher

from usr.constants import DEFAULT_LOG_LEVEL

_observer = None


@provider(ILogObserver)
class LevelObserver:

    def __init__(self, level: str | NamedConstant = DEFAULT_LOG_LEVEL, stream=None):
        if isinstance(level, str):
            level = level.lower()
            if level == 'warning':
                level = 'warn'
            level = LogLevel.levelWithName(level)
        self._level = level
        self._stream = stream

    @property
    def level(self) -> NamedConstant:
        return self._level

    def __call__(self, event: LogEvent) -> None:
        event_level = event.get('log_level', None)
        if event_level is not None and event_level >= self._level:
            print(f"[{event.get('log_namespace', '-')}] {formatEvent(event)}", file=self._stream or sys.stderr)


def start_logging(level: str = DEFAULT_LOG_LEVEL, stream=None) -> LevelObserver:
    """
    Route every twisted log event at or above ``level`` to ``stream`` (stderr by default).

    Calling it again replaces the previous observer.
    """
    global _observer
    observer = LevelObserver(level, stream)
    if _observer is None:
        globalLogBeginner.beginLoggingTo([observer], redirectStandardIO=False)
    else:
        globalLogPublisher.removeObserver(_observer)
        globalLogPublisher.addObserver(observer)
    _observer = observer
    return observer

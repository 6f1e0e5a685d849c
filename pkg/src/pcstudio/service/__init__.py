from .app import AppState, ServiceConfig, create_app
from .jobs import JobManager, JobRecord
from .store import ArtifactStore, SubjectRegistry

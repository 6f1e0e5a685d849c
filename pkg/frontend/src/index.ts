export { ApiClient, ServiceError } from "./api.js";
export type {
  ComposeRequestBody,
  EditRequestBody,
  FetchLike,
  ImageRef,
  JobRecord,
  StudioConfig,
} from "./api.js";
export { EditSession } from "./session.js";
export type { HistoryEntry, SessionOptions } from "./session.js";
export { ComposeCanvas } from "./compose.js";
export type { ComposeOptions, OverlayLayer } from "./compose.js";

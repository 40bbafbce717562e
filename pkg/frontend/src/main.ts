import { ReviewApi } from "./api.js";
import { bindKeyboard } from "./keyboard.js";
import { CanvasBitmapSource } from "./overlay.js";
import { ReviewView } from "./render.js";
import { ReviewController } from "./state.js";

const LEASE_PING_MS = 60_000;

function sessionName(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("session");
  if (fromQuery !== null && fromQuery !== "") {
    return fromQuery;
  }
  return "reviewer";
}

export function start(root: HTMLElement): ReviewController {
  const api = new ReviewApi();
  const controller = new ReviewController(api, sessionName());
  const view = new ReviewView(root, controller, new CanvasBitmapSource());
  controller.subscribe((state) => view.render(state));
  bindKeyboard(window, controller);
  window.setInterval(() => void controller.renewLease(), LEASE_PING_MS);
  void controller.loadNext();
  return controller;
}

const root = document.getElementById("app");
if (root !== null) {
  start(root);
}

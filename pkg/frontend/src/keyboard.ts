import type { ReviewController } from "./state.js";

function isEditable(target: EventTarget | null): boolean {
  if (!(target instanceof HTMLElement)) {
    return false;
  }
  const tag = target.tagName;
  return (
    tag === "INPUT" || tag === "TEXTAREA" || tag === "SELECT" || target.isContentEditable
  );
}

/**
 * Bind the review shortcuts: A accepts, D discards, X removes the selected
 * instance. Keys are ignored while typing in a field or when a modifier is
 * held, so browser shortcuts keep working. Returns an unbind function.
 */
export function bindKeyboard(target: EventTarget, controller: ReviewController): () => void {
  const onKeyDown = (event: Event) => {
    const e = event as KeyboardEvent;
    if (e.ctrlKey || e.metaKey || e.altKey) {
      return;
    }
    if (isEditable(e.target)) {
      return;
    }
    switch (e.key.toLowerCase()) {
      case "a":
        e.preventDefault();
        void controller.accept();
        break;
      case "d":
        e.preventDefault();
        void controller.discard();
        break;
      case "x":
        e.preventDefault();
        void controller.removeSelected();
        break;
      default:
        break;
    }
  };
  target.addEventListener("keydown", onKeyDown);
  return () => target.removeEventListener("keydown", onKeyDown);
}

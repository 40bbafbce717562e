import type { Bitmap, BitmapSource, OverlayLayer } from "./overlay.js";
import { classesPresent, compositeOverlay, cssColor } from "./overlay.js";
import type { ReviewController, ReviewState } from "./state.js";
import type { InstanceView, PairPayload } from "./types.js";
import { CLASS_NAMES } from "./types.js";

/**
 * DOM view for the review session. The whole tree is rebuilt from the
 * controller state on every change; nothing in here owns state of its own
 * except the decoded-bitmap cache and a paint epoch that discards stale
 * async overlay paints.
 */
export class ReviewView {
  private readonly root: HTMLElement;
  private readonly controller: ReviewController;
  private readonly bitmaps: BitmapSource;
  private readonly bitmapCache = new Map<string, Promise<Bitmap>>();
  private paintEpoch = 0;

  constructor(root: HTMLElement, controller: ReviewController, bitmaps: BitmapSource) {
    this.root = root;
    this.controller = controller;
    this.bitmaps = bitmaps;
  }

  render(state: ReviewState): void {
    this.root.textContent = "";
    this.root.appendChild(this.header(state));
    if (state.notice !== null) {
      const toast = el("div", "toast");
      toast.textContent = state.notice;
      this.root.appendChild(toast);
    }
    switch (state.phase) {
      case "loading":
        this.root.appendChild(this.loading());
        break;
      case "done":
        this.root.appendChild(this.completion(state));
        break;
      case "error":
        this.root.appendChild(this.errorPanel());
        break;
      case "reviewing":
        if (state.pair !== null) {
          this.root.appendChild(this.pairPanel(state, state.pair));
        }
        break;
    }
  }

  private header(state: ReviewState): HTMLElement {
    const bar = el("header", "top-bar");
    const title = el("span", "app-title");
    title.textContent = "Change review";
    bar.appendChild(title);
    const progress = el("span", "progress");
    if (state.progress !== null) {
      const p = state.progress;
      progress.textContent =
        `${p.accepted} accepted / ${p.discarded} discarded / ${p.pending} pending of ${p.total}`;
    }
    bar.appendChild(progress);
    return bar;
  }

  private loading(): HTMLElement {
    const panel = el("div", "loading");
    panel.textContent = "Loading next pair…";
    return panel;
  }

  private completion(state: ReviewState): HTMLElement {
    const panel = el("div", "completion");
    const heading = el("h2");
    heading.textContent = "Queue empty";
    panel.appendChild(heading);
    const stats = el("p", "stats");
    if (state.progress !== null) {
      const p = state.progress;
      stats.textContent =
        `Reviewed ${p.accepted + p.discarded} of ${p.total} pairs: ` +
        `${p.accepted} accepted, ${p.discarded} discarded.`;
    } else {
      stats.textContent = "Nothing left to review.";
    }
    panel.appendChild(stats);
    return panel;
  }

  private errorPanel(): HTMLElement {
    const panel = el("div", "error-panel");
    const msg = el("p");
    msg.textContent = "The review service is unreachable.";
    panel.appendChild(msg);
    const retry = el("button", "retry-btn") as HTMLButtonElement;
    retry.textContent = "Retry";
    retry.addEventListener("click", () => void this.controller.loadNext());
    panel.appendChild(retry);
    return panel;
  }

  private pairPanel(state: ReviewState, pair: PairPayload): HTMLElement {
    const panel = el("section", "pair-panel");

    const meta = el("div", "pair-meta");
    const pairId = el("span", "pair-id");
    pairId.textContent = pair.pair_id;
    meta.appendChild(pairId);
    const coverage = el("span", "coverage");
    coverage.textContent = `common view ${(pair.coverage * 100).toFixed(1)}%`;
    meta.appendChild(coverage);
    panel.appendChild(meta);

    const figures = el("div", "figures");
    figures.appendChild(this.figure("earlier", pair.images.t0, null));
    const canvas = el("canvas", "overlay-canvas") as HTMLCanvasElement;
    figures.appendChild(this.figure("later", pair.images.t1, canvas));
    panel.appendChild(figures);
    void this.paintOverlay(state, pair, canvas);

    panel.appendChild(this.layerControls(state, pair));
    panel.appendChild(this.instanceList(state, pair));
    panel.appendChild(this.actions(state));
    return panel;
  }

  private figure(label: string, src: string, canvas: HTMLCanvasElement | null): HTMLElement {
    const fig = el("figure", "image-figure");
    const stack = el("div", "overlay-stack");
    const img = el("img") as HTMLImageElement;
    img.src = src;
    img.alt = label;
    stack.appendChild(img);
    if (canvas !== null) {
      stack.appendChild(canvas);
    }
    fig.appendChild(stack);
    const caption = el("figcaption");
    caption.textContent = label;
    fig.appendChild(caption);
    return fig;
  }

  private layerControls(state: ReviewState, pair: PairPayload): HTMLElement {
    const controls = el("div", "layer-controls");
    for (const changeClass of classesPresent(pair.instances)) {
      const label = el("label", "layer-label");
      const box = el("input", "layer-toggle") as HTMLInputElement;
      box.type = "checkbox";
      box.checked = state.enabledClasses.has(changeClass);
      box.dataset["changeClass"] = String(changeClass);
      box.addEventListener("change", () => this.controller.toggleClass(changeClass));
      label.appendChild(box);
      const swatch = el("span", "swatch");
      swatch.style.backgroundColor = cssColor(changeClass);
      label.appendChild(swatch);
      label.appendChild(document.createTextNode(CLASS_NAMES[changeClass] ?? `class ${changeClass}`));
      controls.appendChild(label);
    }
    const slider = el("input", "opacity-slider") as HTMLInputElement;
    slider.type = "range";
    slider.min = "0";
    slider.max = "100";
    slider.value = String(Math.round(state.overlayOpacity * 100));
    slider.addEventListener("input", () => {
      this.controller.setOpacity(Number(slider.value) / 100);
    });
    controls.appendChild(slider);
    return controls;
  }

  private instanceList(state: ReviewState, pair: PairPayload): HTMLElement {
    const list = el("ul", "instance-list");
    for (const inst of pair.instances) {
      list.appendChild(this.instanceRow(state, inst));
    }
    if (pair.instances.length === 0) {
      const empty = el("li", "no-instances");
      empty.textContent = "No instances on this pair.";
      list.appendChild(empty);
    }
    return list;
  }

  private instanceRow(state: ReviewState, inst: InstanceView): HTMLElement {
    const row = el("li", "instance-row");
    if (inst.instance_id !== null) {
      row.dataset["instanceId"] = inst.instance_id;
      row.addEventListener("click", () => {
        this.controller.selectInstance(
          state.selectedInstance === inst.instance_id ? null : inst.instance_id,
        );
      });
    }
    if (inst.instance_id !== null && inst.instance_id === state.selectedInstance) {
      row.classList.add("selected");
    }
    const swatch = el("span", "swatch");
    swatch.style.backgroundColor = cssColor(inst.change_class);
    row.appendChild(swatch);
    const name = el("span", "class-name");
    name.textContent =
      inst.change_class !== null ? CLASS_NAMES[inst.change_class] ?? "unknown" : "unlabeled";
    row.appendChild(name);
    const phrase = el("span", "phrase");
    phrase.textContent = inst.phrase ?? "(no phrase)";
    row.appendChild(phrase);
    const area = el("span", "area");
    area.textContent = `${inst.area} px`;
    row.appendChild(area);
    return row;
  }

  private actions(state: ReviewState): HTMLElement {
    const bar = el("div", "actions");
    const accept = el("button", "accept-btn") as HTMLButtonElement;
    accept.textContent = "Accept (A)";
    accept.disabled = state.submitting;
    accept.addEventListener("click", () => void this.controller.accept());
    bar.appendChild(accept);
    const discard = el("button", "discard-btn") as HTMLButtonElement;
    discard.textContent = "Discard (D)";
    discard.disabled = state.submitting;
    discard.addEventListener("click", () => void this.controller.discard());
    bar.appendChild(discard);
    const remove = el("button", "remove-btn") as HTMLButtonElement;
    remove.textContent = "Remove instance (X)";
    remove.disabled = state.submitting || state.selectedInstance === null;
    remove.addEventListener("click", () => void this.controller.removeSelected());
    bar.appendChild(remove);
    return bar;
  }

  /**
   * Decode the enabled instance masks and draw the composited overlay.
   * Runs after the synchronous render; a newer render bumps the epoch and
   * the stale paint is dropped. Environments without a 2d context (tests)
   * skip the draw.
   */
  private async paintOverlay(
    state: ReviewState,
    pair: PairPayload,
    canvas: HTMLCanvasElement,
  ): Promise<void> {
    const epoch = ++this.paintEpoch;
    const layers: OverlayLayer[] = [];
    for (const inst of pair.instances) {
      if (inst.instance_id === null || inst.change_class === null) {
        continue;
      }
      if (!state.enabledClasses.has(inst.change_class)) {
        continue;
      }
      let bitmap: Bitmap;
      try {
        bitmap = await this.loadBitmap(inst.png);
      } catch {
        continue;
      }
      layers.push({ instanceId: inst.instance_id, changeClass: inst.change_class, bitmap });
    }
    if (epoch !== this.paintEpoch) {
      return;
    }
    // Headless DOMs used in tests ship neither ImageData nor a 2d context,
    // so skip the draw there instead of tripping their stub canvas.
    if (typeof ImageData === "undefined" || layers.length === 0) {
      return;
    }
    const ctx = canvas.getContext("2d");
    if (ctx === null) {
      return;
    }
    const first = layers[0]!;
    canvas.width = first.bitmap.width;
    canvas.height = first.bitmap.height;
    const rgba = compositeOverlay(first.bitmap.width, first.bitmap.height, layers, {
      enabledClasses: state.enabledClasses,
      opacity: state.overlayOpacity,
      highlightId: state.selectedInstance,
    });
    ctx.putImageData(new ImageData(rgba, first.bitmap.width, first.bitmap.height), 0, 0);
  }

  private loadBitmap(url: string): Promise<Bitmap> {
    let pending = this.bitmapCache.get(url);
    if (pending === undefined) {
      pending = this.bitmaps.load(url);
      this.bitmapCache.set(url, pending);
    }
    return pending;
  }
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className !== undefined) {
    node.className = className;
  }
  return node;
}

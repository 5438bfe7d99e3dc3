// Event database browser: paginated table with crop thumbnails.

import { ApiClient, ApiError, EventJson } from "./api.js";
import { cropToBBox, escapeHtml } from "./chat.js";
import { EventBrowserState, currentPage, pageCount } from "./state.js";

export interface EventsElements {
  tableBody: HTMLElement;
  emptyState: HTMLElement;
  pageLabel: HTMLElement;
  prevButton: HTMLButtonElement;
  nextButton: HTMLButtonElement;
  errorState: HTMLElement;
}

export class EventsPane {
  readonly state: EventBrowserState = { offset: 0, limit: 10, total: 0 };

  constructor(
    private readonly api: ApiClient,
    private readonly el: EventsElements,
  ) {
    el.prevButton.addEventListener("click", () => void this.page(-1));
    el.nextButton.addEventListener("click", () => void this.page(1));
  }

  private async page(direction: number): Promise<void> {
    const next = this.state.offset + direction * this.state.limit;
    if (next < 0 || next >= Math.max(1, this.state.total)) return;
    this.state.offset = next;
    await this.refresh();
  }

  async refresh(): Promise<void> {
    try {
      const page = await this.api.listEvents(this.state.offset, this.state.limit);
      this.state.total = page.total;
      this.render(page.events);
      this.el.errorState.hidden = true;
    } catch (err) {
      // explicit error state, never a silently blank panel
      this.el.errorState.hidden = false;
      this.el.errorState.textContent =
        err instanceof ApiError ? `cannot load events: ${err.message}` : String(err);
    }
  }

  private render(events: EventJson[]): void {
    const { el, state } = this;
    el.emptyState.hidden = state.total !== 0;
    el.pageLabel.textContent = `page ${currentPage(state)} / ${pageCount(state)} (${state.total} events)`;
    el.prevButton.disabled = state.offset === 0;
    el.nextButton.disabled = state.offset + state.limit >= state.total;
    el.tableBody.replaceChildren(
      ...events.map((event) => {
        const row = document.createElement("tr");
        const flag = event.localization_flagged ? " ⚑" : "";
        row.innerHTML =
          `<td class="thumb-cell"></td>` +
          `<td>${escapeHtml(event.question)}</td>` +
          `<td>${escapeHtml(event.answer)}</td>` +
          `<td class="mono">${event.event_id}${flag}</td>`;
        const img = document.createElement("img");
        img.className = "event-thumb";
        img.alt = event.event_id;
        img.src = this.api.eventImageUrl(event.event_id);
        img.addEventListener("load", () => cropToBBox(img, event.bbox));
        row.querySelector(".thumb-cell")!.append(img);
        return row;
      }),
    );
  }
}
